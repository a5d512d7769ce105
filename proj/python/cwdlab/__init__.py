"""Cautious weight decay optimizers, continuous-time flows and experiment runners."""

from __future__ import annotations

from os import PathLike
from typing import Any, Sequence

from ._core import (
    ConfigError,
    DimensionError,
    NumericalError,
    Objective,
    cwd_mask,
    figure3,
    finite_diff_grad,
    integrate,
    newton_schulz,
    objective,
    pareto_check,
    quadratic,
    run_file,
    run_text,
)
from ._core import _Optimizer

__all__ = [
    "ConfigError",
    "DimensionError",
    "NumericalError",
    "Objective",
    "Optimizer",
    "cwd_mask",
    "figure3",
    "finite_diff_grad",
    "integrate",
    "newton_schulz",
    "objective",
    "pareto_check",
    "quadratic",
    "run",
]


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class Optimizer:
    """A stateful optimizer.

    Keyword arguments are the same keys the [optimizer] config section takes,
    except that the decay coefficient is spelled ``weight_decay``.
    """

    def __init__(self, family: str, dim: int, *, seed: int = 0, weight_decay: float = 0.0, **options: Any):
        kv = {k: _fmt(v) for k, v in options.items()}
        kv["family"] = family
        kv["lambda"] = _fmt(float(weight_decay))
        self._impl = _Optimizer(kv, dim, seed)

    def step(self, x: Sequence[float], grad: Sequence[float]) -> list[float]:
        return self._impl.step(list(map(float, x)), list(map(float, grad)))

    def __getattr__(self, name: str) -> Any:
        # spec, t, m, v, last_mask, last_update
        return getattr(self._impl, name)


def run(config: str | PathLike[str], *, seed: int | None = None, out: str | PathLike[str] | None = None,
        emit_lyapunov: bool = False) -> dict[str, Any]:
    """Runs an INI config given as a path, or as INI text if it contains a newline."""
    if isinstance(config, str) and "\n" in config:
        return run_text(config, seed=seed, out=out, emit_lyapunov=emit_lyapunov)
    return run_file(config, seed=seed, out=out, emit_lyapunov=emit_lyapunov)
