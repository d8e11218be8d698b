"""Convergence-gap bound calculator.

Evaluates the per-round contraction/noise terms and the resulting optimality
gap bound from user-supplied smoothness, PL, and gradient-variance constants.
The constants are analysis inputs, not measured quantities; the bound is
reported alongside empirical loss gaps for qualitative comparison only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .selection import coefficient_mismatch


@dataclass
class BoundConstants:
    """Analysis constants: L-smoothness, PL constant, gradient-variance bound,
    and the expected initial optimality gap."""

    lipschitz: float = 1.0
    pl_constant: float = 0.0
    gradient_variance: float = 1.0
    initial_gap: float = 1.0

    def __post_init__(self) -> None:
        if self.lipschitz <= 0:
            raise ConfigurationError("lipschitz must be positive")
        if self.pl_constant < 0 or self.gradient_variance < 0 or self.initial_gap < 0:
            raise ConfigurationError("pl_constant, gradient_variance, initial_gap must be >= 0")


def round_terms(
    mu: float,
    tau: int,
    pl_constant: float,
    lipschitz: float,
    gradient_variance: float,
    batch_size: int,
    a: np.ndarray,
    qmse: float,
) -> tuple[float, float, float]:
    """Per-round terms (c_t, b_t, L_t) of the one-step gap recursion.

    c_t = 1 - mu*tau*delta contracts the gap, b_t collects the local-drift
    noise, and L_t adds the aggregation mismatch plus the quantization MSE.
    The step-size conditions are checked and warned about, but values are
    returned regardless.
    """
    if 1.0 - (lipschitz**2 * mu**2 / 2.0) * tau * (tau - 1) - lipschitz * mu * tau < 0:
        warnings.warn(f"step-size condition violated at mu={mu}, tau={tau}", stacklevel=2)
    if 1.0 - mu * tau * pl_constant < 0:
        warnings.warn(f"contraction condition violated at mu={mu}, tau={tau}", stacklevel=2)
    c_t = 1.0 - mu * tau * pl_constant
    b_t = (lipschitz**2 * mu**3 / 2.0) * (tau * (tau - 1) / 2.0) * gradient_variance / batch_size
    l_t = mu**2 * gradient_variance / batch_size * tau * coefficient_mismatch(a) + qmse
    return c_t, b_t, l_t


def optimality_gap_bound(
    constants: BoundConstants,
    schedule: list[tuple[float, np.ndarray, float]],
    tau: int,
    batch_size: int,
) -> float:
    """Gap bound after running the (mu_t, a_t, qmse_t) schedule.

    Returns (prod_t c_t) * initial_gap + sum_t (b_t + L/2 * L_t) * prod_{i>t} c_i,
    i.e. the fully unrolled one-step recursion.
    """
    gap = constants.initial_gap
    for mu, a, qmse in schedule:
        c_t, b_t, l_t = round_terms(
            mu,
            tau,
            constants.pl_constant,
            constants.lipschitz,
            constants.gradient_variance,
            batch_size,
            a,
            qmse,
        )
        gap = c_t * gap + b_t + constants.lipschitz / 2.0 * l_t
    return float(gap)


def estimate_gradient_variance(
    batch_grads: np.ndarray, full_grad: np.ndarray, batch_size: int
) -> float:
    """Empirical gradient-variance bound from sampled mini-batch gradients.

    Given N stochastic gradients g_i at a fixed parameter vector and the exact
    gradient there, returns B * mean_i ||g_i - grad||^2, the smallest constant
    for which the variance bound holds on this sample.
    """
    batch_grads = np.atleast_2d(np.asarray(batch_grads, dtype=float))
    diff = batch_grads - np.asarray(full_grad, dtype=float)
    return float(batch_size * np.mean(np.sum(diff**2, axis=1)))
