"""Adjoint shadowing sensitivities of chaotic systems by the stabilized march."""

__version__ = "0.1.0"

from .dynamics import KuramotoSivashinsky, LinearSystem, Lorenz63, make_system  # noqa: E402
from .estimator import LyapunovTransformer, StabilizedMarch  # noqa: E402
from .shadowing import MarchConfig, run_march  # noqa: E402

__all__ = [
    "KuramotoSivashinsky",
    "LinearSystem",
    "Lorenz63",
    "LyapunovTransformer",
    "MarchConfig",
    "StabilizedMarch",
    "make_system",
    "run_march",
]
