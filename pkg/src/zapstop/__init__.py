"""Matrix-gain Q-learning (identity, fixed-point Kalman, Zap) for discounted optimal stopping."""

__version__ = "0.1.0"
