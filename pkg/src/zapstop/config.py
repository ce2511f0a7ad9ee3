"""Experiment configuration: INI files with one section per concern.

Example::

    [experiment]
    seed = 0
    replicas = 500

    [chain]
    kind = gbm
    beta = 0.999

    [basis]
    spec = finance10

    [algorithm]
    strategy = zap
    N = 2000000

    [alpha]
    kind = harmonic

    [gamma]
    kind = polynomial
    rho = 0.85

Unknown sections or keys are rejected so that typos cannot silently fall back
to defaults. ``to_dict`` returns the fully resolved values, which are embedded
in every output artifact.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .chain import FiniteChainModel, GbmRatioChain, random_finite_chain
from .features import FeatureError, resolve_basis
from .gains import STRATEGIES, GainError, StepSizeSchedule
from .learner import snapshot_points


class ConfigError(ValueError):
    pass


@dataclass
class ChainSpec:
    kind: str = "finite"
    file: str = ""
    random_states: int = 10
    random_seed: int = 0
    beta: float = 0.95
    window: int = 100
    sigma: float = 0.02
    drift: float = 0.0004


@dataclass
class ScheduleSpec:
    kind: str = "harmonic"
    g: float = 1.0
    b: float = 0.0
    rho: float = 0.85

    def build(self) -> StepSizeSchedule:
        return StepSizeSchedule(self.kind, self.g, self.b, self.rho)


@dataclass
class AlgorithmSpec:
    strategy: str = "zap"
    N: int = 10**6
    rel_threshold: float = 1e-8
    clamp_radius: float = 0.0
    eig_clamp: float = 0.0
    snapshots: str = "geometric:1.2"
    theta0: str = ""


@dataclass
class EvalSpec:
    n_runs: int = 500
    seed: int = 1000
    x0: str = "auto"
    horizon: str = "auto"
    bins: int = 30


@dataclass
class AnalyzeSpec:
    theta_star: str = "oracle"
    reference_N: int = 2 * 10**6
    reference_seed: int = 10**6
    noise_T: int = 10**6
    noise_seed: int = 0
    noise_batches: str = "auto"
    coordinate: int = 0
    bins: int = 30
    ode_horizon: float = 2.0
    ode_starts: int = 12


@dataclass
class ExperimentConfig:
    seed: int = 0
    replicas: int = 1
    threads: int = 1
    output: str = ""
    chain: ChainSpec = field(default_factory=ChainSpec)
    basis: str = "tabular"
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    alpha: ScheduleSpec = field(default_factory=ScheduleSpec)
    gamma: ScheduleSpec | None = None
    evaluate: EvalSpec = field(default_factory=EvalSpec)
    analyze: AnalyzeSpec = field(default_factory=AnalyzeSpec)
    base_dir: str = "."

    def __post_init__(self):
        if self.gamma is None:
            # Zap averages A-samples with a faster rate than theta; Kalman uses 1/n.
            if self.algorithm.strategy == "zap":
                self.gamma = ScheduleSpec("polynomial", rho=0.85)
            else:
                self.gamma = ScheduleSpec("harmonic")

    # ----------------------------------------------------------------- builders
    def _path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def build_chain(self):
        c = self.chain
        if c.kind == "finite":
            if c.file:
                return FiniteChainModel.load(self._path(c.file))
            return random_finite_chain(c.random_states, c.random_seed, c.beta)
        return GbmRatioChain(window=c.window, sigma=c.sigma, drift=c.drift, beta=c.beta)

    def build_basis(self, chain):
        spec = self.basis
        if spec.startswith("custom:"):
            spec = "custom:" + str(self._path(spec[len("custom:"):]))
        return resolve_basis(spec, chain)

    def schedules(self):
        gamma = self.gamma.build() if self.algorithm.strategy != "identity" else None
        return self.alpha.build(), gamma

    def theta0(self, d: int):
        if not self.algorithm.theta0.strip():
            return None
        vals = np.array([float(v) for v in self.algorithm.theta0.split(",")])
        if vals.shape != (d,):
            raise ConfigError(f"theta0 has {vals.size} entries, basis has dimension {d}")
        return vals

    def x0(self, chain):
        spec = self.evaluate.x0.strip()
        if isinstance(chain, GbmRatioChain):
            if spec in ("auto", "ones"):
                return np.ones(chain.window)
            raise ConfigError("finance evaluation supports x0 = ones only")
        return 0 if spec == "auto" else int(spec)

    def horizon(self):
        h = self.evaluate.horizon.strip()
        return None if h == "auto" else int(h)

    def noise_batches(self):
        v = self.analyze.noise_batches.strip()
        return None if v == "auto" else int(v)

    def learner_kwargs(self, chain, features) -> dict:
        alpha, gamma = self.schedules()
        a = self.algorithm
        return dict(
            strategy=a.strategy, alpha=alpha, gamma=gamma, N=a.N, snapshot_plan=a.snapshots,
            theta0=self.theta0(features.d), rel_threshold=a.rel_threshold,
            clamp_radius=a.clamp_radius, eig_clamp=a.eig_clamp,
        )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("base_dir")
        return doc

    def validate(self) -> "ExperimentConfig":
        """Resolve every referenced object once; raises :class:`ConfigError`."""
        if self.chain.kind not in ("finite", "gbm"):
            raise ConfigError(f"unknown chain kind {self.chain.kind!r}")
        if self.algorithm.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.algorithm.strategy!r}")
        if self.algorithm.N < 1:
            raise ConfigError("N must be >= 1")
        if self.replicas < 1 or self.threads < 1:
            raise ConfigError("replicas and threads must be >= 1")
        if self.evaluate.n_runs < 1:
            raise ConfigError("evaluate.n_runs must be >= 1")
        try:
            chain = self.build_chain()
            features = self.build_basis(chain)
            self.schedules()
            self.theta0(features.d)
            self.x0(chain)
            self.horizon()
            self.noise_batches()
            snapshot_points(self.algorithm.snapshots, self.algorithm.N)
        except (GainError, FeatureError, OSError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 <= self.analyze.coordinate < features.d:
            raise ConfigError("analyze.coordinate is outside the basis dimension")
        return self


_SECTIONS = {
    "experiment": None,
    "chain": ChainSpec,
    "basis": None,
    "algorithm": AlgorithmSpec,
    "alpha": ScheduleSpec,
    "gamma": ScheduleSpec,
    "evaluate": EvalSpec,
    "analyze": AnalyzeSpec,
}
_EXPERIMENT_KEYS = {"seed": int, "replicas": int, "threads": int, "output": str}


def _convert(cls, key: str, raw: str):
    default = getattr(cls(), key)
    typ = type(default)
    try:
        if typ is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc


def _fill(cls, section: configparser.SectionProxy):
    known = {f for f in cls.__dataclass_fields__}
    kwargs = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        kwargs[key] = _convert(cls, key, raw)
    return cls(**kwargs)


def preset_names() -> list[str]:
    root = resources.files("zapstop") / "presets"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def _read_text(path: str) -> tuple[str, str]:
    if path.startswith("preset:"):
        name = path[len("preset:"):]
        res = resources.files("zapstop") / "presets" / f"{name}.cfg"
        if not res.is_file():
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
        return res.read_text(encoding="utf-8"), "."
    p = Path(path)
    try:
        return p.read_text(encoding="utf-8"), str(p.parent)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    # Case-sensitive keys so that ``N`` and ``reference_N`` survive.
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    kwargs: dict = {"base_dir": base_dir}
    if parser.has_section("experiment"):
        for key, raw in parser["experiment"].items():
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown key {key!r} in [experiment]")
            try:
                kwargs[key] = _EXPERIMENT_KEYS[key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value {raw!r} for {key}") from exc
    if parser.has_section("basis"):
        extra = set(parser["basis"]) - {"spec"}
        if extra:
            raise ConfigError(f"unknown key(s) {sorted(extra)} in [basis]")
        kwargs["basis"] = parser["basis"].get("spec", "tabular").strip()
    for name, cls in _SECTIONS.items():
        if cls is not None and parser.has_section(name):
            try:
                kwargs[name] = _fill(cls, parser[name])
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
    return ExperimentConfig(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    """Read ``path`` (or ``preset:<name>``) and validate it."""
    text, base = _read_text(path)
    return parse_config(text, base).validate()
