"""Command-line front end: ``zapstop {train,evaluate,analyze,oracle-check,ode-check}``.

Exit codes: 0 success, 1 usage or configuration error (including missing or
corrupt records), 2 numerical abort (divergence, failed checks, violated
preconditions).

The default output directory is ``--out``, else ``[experiment] output``, else
``$ZAPSTOP_OUT/<config name>`` (``runs/<config name>`` when the variable is
unset).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, oracle
from .chain import FiniteChainModel
from .config import ConfigError, ExperimentConfig, load_config, preset_names
from .evaluation import histogram, evaluate_policies
from .gains import StepSizeSchedule
from .io import write_csv, write_json
from .learner import RunRecord, run_matrix_gain, run_replicas

log = logging.getLogger("zapstop")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
ENV_OUT = "ZAPSTOP_OUT"


class UsageError(Exception):
    pass


class NumericalAbort(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------- helpers

def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "replicas", None) is not None:
        cfg.replicas = args.replicas
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    return cfg.validate()


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.output:
        return Path(cfg.output)
    name = Path(args.config.split(":", 1)[-1]).stem
    return Path(os.environ.get(ENV_OUT, "runs")) / name


def _envelope(cfg: ExperimentConfig, command: str, **extra) -> dict:
    return {"version": __version__, "command": command, "config": cfg.to_dict(), **extra}


def _load_records(path) -> list[RunRecord]:
    """Records listed in ``<path>/manifest.json`` (or every ``records/*.json``)."""
    path = Path(path)
    manifest = path / "manifest.json" if path.is_dir() else path
    try:
        if manifest.is_file():
            doc = json.loads(manifest.read_text(encoding="utf-8"))
            files = [manifest.parent / f for f in doc["records"]]
        else:
            files = sorted((path / "records").glob("replica_*.json"))
        records = [RunRecord.load(f) for f in files]
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot read records from {path}: {exc}") from exc
    if not records:
        raise UsageError(f"no records found in {path}")
    return records


def _theta_star(cfg: ExperimentConfig, chain, features):
    """``(theta*, source)`` following ``[analyze] theta_star``."""
    spec = cfg.analyze.theta_star
    if spec == "oracle":
        if not isinstance(chain, FiniteChainModel):
            raise UsageError("theta_star = oracle needs a finite chain; use 'reference' or 'file:<path>'")
        return oracle.solve_theta_star(chain, features), "oracle"
    if spec == "reference":
        ref = run_matrix_gain(
            chain, features, "zap", StepSizeSchedule("harmonic"), StepSizeSchedule("polynomial", rho=0.85),
            cfg.analyze.reference_N, cfg.analyze.reference_seed, snapshot_plan="final",
        )
        if ref.status != "ok":
            raise NumericalAbort("reference Zap run diverged")
        return ref.theta_final, f"reference zap run N={cfg.analyze.reference_N} seed={cfg.analyze.reference_seed}"
    if spec.startswith("file:"):
        p = cfg._path(spec[len("file:"):])
        try:
            theta = np.asarray(json.loads(p.read_text())["theta_star"], dtype=float)
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"cannot read theta_star from {p}: {exc}") from exc
        if theta.shape != (features.d,):
            raise UsageError("theta_star file does not match the basis dimension")
        return theta, f"file {p}"
    raise UsageError(f"unknown theta_star source {spec!r}")


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    chain = cfg.build_chain()
    features = cfg.build_basis(chain)
    records = run_replicas(
        chain, features, cfg.replicas, cfg.seed, threads=cfg.threads,
        config=_envelope(cfg, "train")["config"], **cfg.learner_kwargs(chain, features),
    )
    names = []
    for m, rec in enumerate(records):
        name = f"records/replica_{m:04d}.json"
        write_json(out / name, rec.to_dict())
        rec.write_csv(out / name.replace(".json", ".csv"))
        names.append(name)
    diverged = [m for m, r in enumerate(records) if r.status != "ok"]
    write_json(out / "manifest.json", _envelope(
        cfg, "train", out=str(out), records=names, seeds=[r.seed for r in records],
        status=[r.status for r in records], diverged=diverged,
    ))
    log.info("wrote %d records to %s", len(records), out)
    if diverged:
        raise NumericalAbort(f"{len(diverged)} replica(s) diverged: {diverged}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    records = _load_records(args.records or out)
    ok = [(m, r) for m, r in enumerate(records) if r.status == "ok"]
    if not ok:
        raise NumericalAbort("every record diverged; nothing to evaluate")
    chain = cfg.build_chain()
    features = cfg.build_basis(chain)
    thetas = np.array([r.theta_final for _, r in ok])
    if thetas.shape[1] != features.d:
        raise UsageError("records do not match the configured basis dimension")
    x0 = cfg.x0(chain)
    est = evaluate_policies(chain, thetas, features, x0, cfg.evaluate.n_runs, cfg.evaluate.seed, cfg.horizon())
    write_csv(out / "rewards.csv", ["replica", "mean", "se"],
              [[m, e.mean, e.se] for (m, _), e in zip(ok, est)])
    edges, counts = histogram([e.mean for e in est], cfg.evaluate.bins)
    write_csv(out / "reward_histogram.csv", ["bin_lo", "bin_hi", "count"],
              [[edges[i], edges[i + 1], int(c)] for i, c in enumerate(counts)])
    means = np.array([e.mean for e in est])
    write_json(out / "evaluate.json", _envelope(
        cfg, "evaluate", records=str(args.records or out), x0=np.asarray(x0).tolist(),
        convention="reward" if chain.reward_convention else "cost",
        skipped_diverged=[m for m, r in enumerate(records) if r.status != "ok"],
        median=float(np.median(means)), estimates=[e.to_dict() for e in est],
    ))
    return EXIT_OK


def _covariance_inputs(cfg, chain, features, theta_star):
    """``(A, Sigma_psi, Sigma_eps)`` at ``theta_star``: exact where possible, else Monte-Carlo."""
    T, seed, nb = cfg.analyze.noise_T, cfg.analyze.noise_seed, cfg.noise_batches()
    if isinstance(chain, FiniteChainModel):
        A = oracle.exact_A(chain, features, theta_star)
        S = oracle.exact_sigma_psi(chain, features)
        centre = A @ theta_star + oracle.exact_b_star(chain, features) \
            + chain.beta * oracle.exact_cbar(chain, features, theta_star)
    else:
        mom = analysis.monte_carlo_moments(chain, features, theta_star, T, seed)
        A, S, centre = mom.A, mom.Sigma_psi, mom.centre
    Sigma_eps = analysis.streamed_noise_covariance(chain, features, theta_star, T, seed, nb, centre)
    return A, S, Sigma_eps


def cmd_analyze(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    records = [r for r in _load_records(args.records or out) if r.status == "ok"]
    if len(records) < 2:
        raise UsageError("covariance analysis needs M >= 2 non-diverged records")
    chain = cfg.build_chain()
    features = cfg.build_basis(chain)
    theta_star, source = _theta_star(cfg, chain, features)
    A, S, Sigma_eps = _covariance_inputs(cfg, chain, features, theta_star)
    alpha, _ = cfg.schedules()
    G = analysis.effective_gain(cfg.algorithm.strategy, alpha.asymptotic_scale, A, S)
    N = records[0].N
    finals = np.array([r.theta_final for r in records])
    report = analysis.covariance_report(G, A, Sigma_eps, finals, theta_star, N)
    coord = cfg.analyze.coordinate
    z = math.sqrt(N) * (finals[:, coord] - theta_star[coord])
    edges, counts = histogram(z, cfg.analyze.bins)
    write_csv(out / "scaled_histogram.csv", ["bin_lo", "bin_hi", "count"],
              [[edges[i], edges[i + 1], int(c)] for i, c in enumerate(counts)])
    extra = {}
    if isinstance(chain, FiniteChainModel) and cfg.algorithm.strategy == "zap":
        xi, region, _, _ = analysis.zap_vector_field(chain, features)
        try:
            prof = analysis.sa_vs_ode_deviation(records[0], alpha, xi, cfg.analyze.ode_horizon,
                                                cfg.analyze.ode_starts, region=region)
            write_csv(out / "deviation.csv", ["start", "deviation"], prof.to_rows())
            extra["deviation"] = prof.to_rows()
        except analysis.AnalysisError as exc:
            extra["deviation_skipped"] = str(exc)
    doc = _envelope(
        cfg, "analyze", records=str(args.records or out), M=len(records), N=N,
        theta_star=theta_star, theta_star_source=source, A=A, Sigma_psi=S, Sigma_eps=Sigma_eps,
        effective_gain=G, **report.to_dict(), **extra,
    )
    write_json(out / "covariance.json", doc)
    if not report.finite:
        log.warning("configuration has infinite asymptotic covariance")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    chain = cfg.build_chain()
    if not isinstance(chain, FiniteChainModel):
        raise UsageError("oracle-check needs a finite chain")
    features = cfg.build_basis(chain)
    report = oracle.property_report(chain, features, seed=cfg.seed)
    write_json(out / "oracle_check.json", _envelope(cfg, "oracle-check", **report))
    for name, c in report["checks"].items():
        print(f"{'PASS' if c['passed'] else 'FAIL'} {name}: {c['value']}")
    if not report["all_passed"]:
        raise NumericalAbort("oracle property checks failed")
    return EXIT_OK


def cmd_ode_check(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    chain = cfg.build_chain()
    if not isinstance(chain, FiniteChainModel):
        raise UsageError("ode-check needs a finite chain")
    features = cfg.build_basis(chain)
    xi, region, b_map, b_star = analysis.zap_vector_field(chain, features)
    w0 = cfg.theta0(features.d)
    w0 = np.zeros(features.d) if w0 is None else w0
    horizon = cfg.analyze.ode_horizon
    traj = analysis.ode_integrate(xi, w0, horizon, dt=1e-2, region=region, b_map=b_map)
    resid = np.linalg.norm(traj.b - b_star, axis=1)
    rate = analysis.exponential_rate(traj.t, resid) if np.all(resid > 0) else float("nan")
    rows = [[t, *w, r] for t, w, r in zip(traj.t, traj.w, resid)]
    write_csv(out / "ode_trajectory.csv", ["t", *[f"w_{i}" for i in range(features.d)], "b_residual"], rows)
    doc = {"b_decay_rate": rate, "rate_ok": bool(abs(rate + 1.0) <= 0.05), "w_final": traj.w[-1]}
    if args.records:
        rec = next((r for r in _load_records(args.records) if r.status == "ok"), None)
        if rec is None:
            raise NumericalAbort("every record diverged")
        alpha, _ = cfg.schedules()
        prof = analysis.sa_vs_ode_deviation(rec, alpha, xi, horizon, cfg.analyze.ode_starts, region=region)
        write_csv(out / "deviation.csv", ["start", "deviation"], prof.to_rows())
        doc["deviation"] = prof.to_rows()
    write_json(out / "ode_check.json", _envelope(cfg, "ode-check", **doc))
    print(f"b-residual decay rate {rate:.4f} (target -1)")
    if not doc["rate_ok"]:
        raise NumericalAbort("b-residual does not decay at rate -1")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "oracle-check": cmd_oracle_check,
    "ode-check": cmd_ode_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zapstop", description="Matrix-gain Q-learning for optimal stopping.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help=f"INI file or preset:<name> ({', '.join(preset_names())})")
        p.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<config name>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--replicas", type=int)
        p.add_argument("--threads", type=int)
        if name in ("evaluate", "analyze", "ode-check"):
            p.add_argument("--records", help="training output directory or manifest")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalAbort, oracle.OracleError, analysis.AnalysisError, np.linalg.LinAlgError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
