"""Distributed loss-delay link-rate controller and the log utility model.

Each overlay link rate follows a primal-subgradient step: grow by the utility
derivative when the link sits on the session's critical cut, shrink by the
measured loss fraction and queuing delay.  Prices and rates never export
negative values; the bracket rule lets internal iterates dip below zero once
before being pulled back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class UtilityParams:
    """Log utility beta*ln(z + delta); delta > 0 bounds the derivative."""

    beta: float = 2.5
    delta: float = 20.0   # kbps

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    @property
    def deriv_bound(self) -> float:
        return self.beta / self.delta


@dataclass(frozen=True)
class ControlParams:
    alpha: float = 60.0               # kbps^2 per util per rate tick
    delay_bound_ms: float = 200.0
    rate_interval_ms: float = 200.0
    report_interval_ms: float = 300.0
    quickstart_s: float = 30.0
    quickstart_alpha_mult: float = 4.0
    quickstart_beta_mult: float = 2.0

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.rate_interval_ms <= 0 or self.report_interval_ms <= 0:
            raise ValueError("control intervals must be positive")
        if self.quickstart_alpha_mult < 1 or self.quickstart_beta_mult < 1:
            raise ValueError("quickstart multipliers must be >= 1")


def utility(z: float, p: UtilityParams) -> float:
    return p.beta * math.log(z + p.delta)


def utility_deriv(z: float, p: UtilityParams) -> float:
    return p.beta / (z + p.delta)


def rate_update(
    c: float,
    is_cut_edge: float,
    u_deriv: float,
    loss: float,
    queue_delay: float,
    alpha: float,
) -> float:
    """One primal step: c + alpha*(U' * indicator - loss - queue_delay).

    ``queue_delay`` is in seconds so it shares the loss fraction's scale.
    The bracket keeps max(0, b) when the current iterate is at or below zero
    and passes b through otherwise; consumers clamp at export.
    """
    b = c + alpha * (u_deriv * is_cut_edge - loss - queue_delay)
    if c <= 0.0:
        return max(0.0, b)
    return b


def quickstart_params(
    t: float, base: ControlParams, u: UtilityParams
) -> tuple[float, float]:
    """(alpha_eff, beta_eff) at time t; boosted during [0, quickstart_s)."""
    if 0.0 <= t < base.quickstart_s:
        return (
            base.alpha * base.quickstart_alpha_mult,
            u.beta * base.quickstart_beta_mult,
        )
    return base.alpha, u.beta
