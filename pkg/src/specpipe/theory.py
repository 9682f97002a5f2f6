"""Closed-form per-token times and speedups for sequential and parallel drafting.

Notation: the draft forward takes ``t``, the target forward ``c * t``, the
window holds ``gamma`` tokens and each drafted token is accepted i.i.d. with
probability ``tau``. Speedups are against target-only decoding, i.e.
``c * t / per_token_time``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

REGIMES = ("ideal", "practical", "rollback")


@dataclass(frozen=True)
class TheoryInputs:
    tau: float
    gamma: int
    c: float
    t: float = 1.0
    c_star: Optional[float] = None

    def __post_init__(self):
        _check(self.tau, self.gamma, self.c, self.t)


@dataclass(frozen=True)
class SpeedupReport:
    per_token_time: float
    speedup_vs_ar: float
    regime: str
    name: str = ""


def _check(tau, gamma, c, t=1.0):
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if int(gamma) != gamma or gamma < 1:
        raise ValueError(f"gamma must be an integer >= 1, got {gamma}")
    if not c > 0 or not t > 0:
        raise ValueError("c and t must be positive")


def _report(per_token, c, t, regime, name):
    speed = 0.0 if math.isinf(per_token) else c * t / per_token
    return SpeedupReport(per_token, speed, regime, name)


def trunc_geo_pmf(tau: float, gamma: int) -> np.ndarray:
    """P(X = k), k = 0..gamma, for the accepted-prefix length of a gamma window."""
    _check(tau, gamma, 1.0)
    k = np.arange(gamma + 1)
    pmf = (1.0 - tau) * tau ** k
    pmf[gamma] = tau ** gamma
    return pmf


def trunc_geo_expectation(tau: float, gamma: int) -> float:
    """E[X] = tau (1 - tau^gamma) / (1 - tau); gamma at tau = 1, 0 at tau = 0."""
    _check(tau, gamma, 1.0)
    if tau == 1.0:
        return float(gamma)
    if tau == 0.0:
        return 0.0
    return tau * (1.0 - tau ** gamma) / (1.0 - tau)


def vanilla_sd_time(tau: float, gamma: int, c: float, t: float = 1.0, regime: str = "practical") -> SpeedupReport:
    """Draft gamma tokens then verify: (gamma + c) t over the tokens a round yields.

    ``ideal`` assumes every draft is accepted (gamma + 1 tokens per round),
    ``practical`` counts tau * gamma + 1.
    """
    _check(tau, gamma, c, t)
    if regime == "ideal":
        per = (gamma + c) / (gamma + 1) * t
    elif regime == "practical":
        per = (gamma + c) / (tau * gamma + 1) * t
    else:
        raise ValueError("regime must be ideal or practical")
    return _report(per, c, t, regime, "vanilla")


def parallel_sd_time(tau: float, gamma: int, c: float, t: float = 1.0, regime: str = "practical") -> SpeedupReport:
    """Draft and verify overlapped: max(gamma t, c t) per span over gamma (or tau gamma) tokens."""
    _check(tau, gamma, c, t)
    span = max(gamma * t, c * t)
    if regime == "ideal":
        per = span / gamma
    elif regime == "practical":
        per = span / (tau * gamma) if tau > 0 else math.inf
    else:
        raise ValueError("regime must be ideal or practical")
    return _report(per, c, t, regime, "parallel")


def expected_tokens_two_round(tau: float, gamma: int) -> float:
    """Tokens credited over two spans when the second only counts after a clean first: (1 + tau^gamma) E[X]."""
    return (1.0 + tau ** gamma) * trunc_geo_expectation(tau, gamma)


def parallel_rollback_time(tau: float, gamma: int, c: float, t: float = 1.0) -> SpeedupReport:
    """Two spans of max(gamma t, c t) per (1 + tau^gamma) E[X] tokens."""
    _check(tau, gamma, c, t)
    e = expected_tokens_two_round(tau, gamma)
    per = 2.0 * max(gamma * t, c * t) / e if e > 0 else math.inf
    return _report(per, c, t, "rollback", "parallel-rollback")


def rollback_speedup_series(tau: float, c: int) -> float:
    """Speedup of the two-span model at gamma = c, written as 0.5 * sum_{k=1..2c} tau^k."""
    return 0.5 * sum(tau ** k for k in range(1, 2 * c + 1))


def parallelvlm_speedup(tau_hat: float, alpha: float, timing) -> SpeedupReport:
    """Speedup tau_hat * c*(alpha) of the pruned parallel pipeline."""
    if not 0.0 <= tau_hat <= 1.0:
        raise ValueError("tau_hat must lie in [0, 1]")
    c_star = timing.c_star(alpha)
    speed = tau_hat * c_star
    per = timing.t_target / speed if speed > 0 else math.inf
    return SpeedupReport(per, speed, "practical", "pruned-parallel")


def simulate_two_round(tau: float, gamma: int, trials: int, rng: np.random.Generator) -> float:
    """Monte Carlo mean of X1 + X2 * [X1 == gamma] with X1, X2 i.i.d. truncated-geometric."""
    _check(tau, gamma, 1.0)
    coins = rng.random((trials, 2, gamma)) < tau
    # accepted prefix length = index of the first failure (gamma if none)
    x = np.where(coins.all(axis=2), gamma, np.argmin(coins, axis=2))
    return float(np.mean(x[:, 0] + np.where(x[:, 0] == gamma, x[:, 1], 0)))


def theory_table(tau: float, gamma: int, c: float, t: float = 1.0) -> list:
    """Every closed form for one input point, in a fixed order."""
    return [
        vanilla_sd_time(tau, gamma, c, t, "ideal"),
        vanilla_sd_time(tau, gamma, c, t, "practical"),
        parallel_sd_time(tau, gamma, c, t, "ideal"),
        parallel_sd_time(tau, gamma, c, t, "practical"),
        parallel_rollback_time(tau, gamma, c, t),
    ]
