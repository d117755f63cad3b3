"""Lagrange multiplier for the ratio-variance constraint."""
from __future__ import annotations

from dataclasses import dataclass, replace

FIXED = "fixed"
DYNAMIC = "dynamic"


@dataclass(frozen=True)
class DualState:
    lam: float = 0.04
    eta_lambda: float = 1e-3
    trust_delta: float = 0.01
    mode: str = FIXED
    ema_beta: float = 0.0
    smoothed_variance: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.eta_lambda <= 0:
            raise ValueError("eta_lambda must be positive")
        if self.trust_delta <= 0:
            raise ValueError("trust_delta must be positive")
        if self.mode not in (FIXED, DYNAMIC):
            raise ValueError(f"dual mode must be 'fixed' or 'dynamic', got {self.mode!r}")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ValueError("ema_beta must lie in [0, 1)")


def update(state: DualState, measured_variance: float) -> DualState:
    """Projected dual descent: lam <- max(0, lam - eta * (delta - v))."""
    if measured_variance < 0:
        raise ValueError(f"measured variance must be non-negative, got {measured_variance}")
    if state.mode == FIXED:
        return state
    if state.ema_beta > 0 and state.smoothed_variance is not None:
        v = state.ema_beta * state.smoothed_variance + (1.0 - state.ema_beta) * measured_variance
    else:
        v = measured_variance
    lam = max(0.0, state.lam - state.eta_lambda * (state.trust_delta - v))
    return replace(state, lam=lam, smoothed_variance=v)
