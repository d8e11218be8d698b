"""Per-round selection of the integer aggregation coefficients.

The exact selection metric couples a learning mismatch term with the
quantization MSE.  Minimizing it under a decoding-MSE threshold is an integer
program, so the main path solves a real relaxation by successive
convexification (a sequence of small equality/quadratically-constrained QPs)
and rounds to integers.  An exhaustive oracle over small coefficient boxes is
provided for validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .channel import ChannelRealization
from .errors import ConfigurationError
from .lattices import LatticeSpec, packing_radius
from .receiver import quantization_mse


@dataclass
class SelectionConfig:
    """Knobs of the per-round coefficient search.

    ``theta`` bounds the decoding MSE of the selected vector; ``epsilon`` is the
    target decode-error rate and is reported against the empirical rate only,
    never enforced analytically.  ``brute_force_bound`` caps the coordinates
    enumerated by the validation oracle.
    """

    theta: float
    epsilon: float = 0.05
    max_iters: int = 8
    qp_tolerance: float = 1e-6
    brute_force_bound: int = 5

    def __post_init__(self) -> None:
        if self.theta <= 0:
            raise ConfigurationError("theta must be positive")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be at least 1")


@dataclass
class MetricParams:
    """Learning-side constants entering the aggregation metric."""

    mu: float
    gradient_variance: float
    batch_size: int
    tau: int
    sigmas: np.ndarray
    sigma_q2: float
    model_size: int


@dataclass
class CoefficientVector:
    """Selected integer weights with their metric value and DMSE slack."""

    a: np.ndarray
    metric: float
    dmse_slack: float
    fallback: bool = False

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a)
        if np.any(self.a < 0) or not np.any(self.a):
            raise ConfigurationError("coefficients must be non-negative and not all zero")

    @property
    def feasible(self) -> bool:
        return self.dmse_slack >= 0.0


@dataclass
class RelaxationResult:
    a: np.ndarray
    fallback: bool
    iterates: list[np.ndarray] = field(default_factory=list)


def coefficient_mismatch(a: np.ndarray) -> float:
    """||a||^2 / (1^T a)^2; equals 1/K for all-ones and is minimized there."""
    a = np.asarray(a, dtype=float)
    return float((a @ a) / a.sum() ** 2)


def aggregation_metric(a: np.ndarray, params: MetricParams) -> float:
    """Exact per-round selection metric: mismatch term plus quantization MSE."""
    sgd_noise = params.mu**2 * params.gradient_variance / params.batch_size * params.tau
    return sgd_noise * coefficient_mismatch(a) + quantization_mse(
        a, params.sigmas, params.sigma_q2, params.model_size
    )


def dmse_quadratic_matrix(h: ChannelRealization, snr: float) -> np.ndarray:
    """The K x K positive-definite matrix (I + SNR * H^T H)^{-1}."""
    H = h.h_real
    m = snr * (H.T @ H)
    m[np.diag_indices_from(m)] += 1.0
    inv = scipy.linalg.cho_solve(scipy.linalg.cho_factor(m, lower=True), np.eye(m.shape[0]))
    return 0.5 * (inv + inv.T)


def default_theta(lattice: LatticeSpec, s: int) -> float:
    """DMSE threshold keeping the per-dimension effective-noise std at one third
    of the packing radius, so decoding noise stays inside the Voronoi cell with
    high probability."""
    return s * packing_radius(lattice) ** 2 / 9.0


def _minimize_quadratic_form(m: np.ndarray, total: float) -> tuple[np.ndarray, float]:
    """min a^T M a  s.t.  1^T a = total, a >= 1."""
    k = m.shape[0]
    if abs(total - k) < 1e-12:
        # The constraint set {1^T a = K, a >= 1} is the single point of all ones.
        ones = np.ones(k)
        return ones, float(ones @ m @ ones)
    x0 = np.full(k, total / k)
    res = scipy.optimize.minimize(
        lambda a: a @ m @ a,
        x0,
        jac=lambda a: 2.0 * m @ a,
        method="SLSQP",
        bounds=[(1.0, None)] * k,
        constraints=[{"type": "eq", "fun": lambda a: a.sum() - total, "jac": lambda a: np.ones(k)}],
        options={"ftol": 1e-12, "maxiter": 300},
    )
    a = np.maximum(res.x, 1.0)
    return a, float(a @ m @ a)


def _kkt_residual(a: np.ndarray, m: np.ndarray, gamma: float, total: float) -> float:
    """KKT residual of the min-norm subproblem at a candidate solution.

    Multipliers for the near-active constraints are fitted by non-negative
    least squares against the stationarity condition
    2a + nu*1 + 2*lambda*M*a - mu = 0.
    """
    grad = 2.0 * a
    quad = float(a @ m @ a)
    cols = [np.ones_like(a), -np.ones_like(a)]
    if quad >= gamma - 1e-6 * max(1.0, gamma):
        cols.append(2.0 * m @ a)
    active = np.flatnonzero(a <= 1.0 + 1e-6)
    for i in active:
        e = np.zeros_like(a)
        e[i] = -1.0
        cols.append(e)
    design = np.column_stack(cols)
    _, rnorm = scipy.optimize.nnls(design, -grad)
    stationarity = rnorm / max(1.0, float(np.linalg.norm(grad)))
    primal = max(
        abs(a.sum() - total) / max(1.0, abs(total)),
        max(0.0, quad - gamma) / max(1.0, gamma),
        max(0.0, float(1.0 - a.min())),
    )
    return max(stationarity, primal)


def _min_norm_subproblem(
    m: np.ndarray, gamma: float, total: float, start: np.ndarray, tol: float
) -> np.ndarray:
    """min ||a||^2  s.t.  1^T a = total, a^T M a <= gamma, a >= 1."""
    k = m.shape[0]
    if abs(total - k) < 1e-12:
        return np.ones(k)
    constraints = [
        {"type": "eq", "fun": lambda a: a.sum() - total, "jac": lambda a: np.ones(k)},
        {"type": "ineq", "fun": lambda a: gamma - a @ m @ a, "jac": lambda a: -2.0 * m @ a},
    ]
    res = scipy.optimize.minimize(
        lambda a: a @ a,
        start,
        jac=lambda a: 2.0 * a,
        method="SLSQP",
        bounds=[(1.0, None)] * k,
        constraints=constraints,
        options={"ftol": 1e-14, "maxiter": 500},
    )
    a = np.maximum(res.x, 1.0)
    if _kkt_residual(a, m, gamma, total) <= tol:
        return a
    # SLSQP occasionally stalls on nearly-degenerate active sets; retry with the
    # interior-point solver before giving up.
    res = scipy.optimize.minimize(
        lambda v: v @ v,
        a,
        jac=lambda v: 2.0 * v,
        method="trust-constr",
        bounds=scipy.optimize.Bounds(np.ones(k), np.full(k, np.inf)),
        constraints=[
            scipy.optimize.LinearConstraint(np.ones((1, k)), total, total),
            scipy.optimize.NonlinearConstraint(
                lambda v: v @ m @ v, -np.inf, gamma, jac=lambda v: 2.0 * m @ v
            ),
        ],
        options={"gtol": 1e-12, "xtol": 1e-14, "maxiter": 2000},
    )
    a = np.maximum(res.x, 1.0)
    residual = _kkt_residual(a, m, gamma, total)
    if residual > tol:
        raise RuntimeError(f"convex subproblem did not reach KKT tolerance ({residual:.2e})")
    return a


def solve_relaxation(
    h: ChannelRealization,
    snr: float,
    sigma_q2: float,
    cfg: SelectionConfig,
    a0: np.ndarray | None = None,
) -> RelaxationResult:
    """Successively convexified real relaxation of the coefficient search.

    Starting from ``a0`` (all ones by default, the ideal-aggregation target),
    each iteration minimizes ||a||^2 with the coefficient sum pinned to its
    previous value, the DMSE quadratic form bounded, and a >= 1.  If no point
    with the pinned sum meets the DMSE bound, the minimum-DMSE point under the
    same pinning is returned instead and flagged as a fallback.
    """
    k = h.h_real.shape[1]
    m = dmse_quadratic_matrix(h, snr)
    gamma = cfg.theta / (1.0 + 2.0 * sigma_q2)
    a = np.ones(k) if a0 is None else np.asarray(a0, dtype=float)
    if a.shape != (k,) or np.any(a < 1.0):
        raise ConfigurationError("initial point must be a length-K vector with entries >= 1")
    best_feasible, quad_min = _minimize_quadratic_form(m, float(a.sum()))
    if quad_min > gamma * (1.0 + 1e-9):
        return RelaxationResult(best_feasible, True, [best_feasible])
    if float(a @ m @ a) > gamma:
        a = best_feasible
    iterates: list[np.ndarray] = []
    for _ in range(cfg.max_iters):
        new = _min_norm_subproblem(m, gamma, float(a.sum()), a, cfg.qp_tolerance)
        iterates.append(new)
        if np.allclose(new, a, rtol=0.0, atol=1e-10):
            a = new
            break
        a = new
    return RelaxationResult(a, False, iterates)


def select_coefficients(
    h: ChannelRealization,
    snr: float,
    sigma_q2: float,
    cfg: SelectionConfig,
    params: MetricParams,
    a0: np.ndarray | None = None,
) -> CoefficientVector:
    """Round the relaxed solution to integers and re-evaluate metric and slack.

    Rounding can push the DMSE quadratic form past its bound; that is reported
    through a negative slack, not treated as fatal.
    """
    relaxed = solve_relaxation(h, snr, sigma_q2, cfg, a0)
    a = np.maximum(np.rint(relaxed.a), 1.0).astype(int)
    m = dmse_quadratic_matrix(h, snr)
    gamma = cfg.theta / (1.0 + 2.0 * sigma_q2)
    slack = float(gamma - a @ m @ a)
    return CoefficientVector(a, aggregation_metric(a, params), slack, relaxed.fallback)


def brute_force_oracle(
    h: ChannelRealization,
    snr: float,
    sigma_q2: float,
    cfg: SelectionConfig,
    params: MetricParams,
) -> CoefficientVector:
    """Exhaustive metric minimizer over {0..bound}^K under the DMSE bound.

    Validation-only: refuses K > 6.  Ties keep the first vector in ascending
    lexicographic order, i.e. the smallest representative of a scale-invariant
    family.  If the threshold excludes every vector, the minimum-DMSE vector is
    returned and flagged as a fallback.
    """
    k = h.h_real.shape[1]
    if k > 6:
        raise ConfigurationError("brute-force oracle is limited to K <= 6")
    bound = cfg.brute_force_bound
    grids = np.meshgrid(*([np.arange(bound + 1)] * k), indexing="ij")
    cand = np.stack(grids, axis=-1).reshape(-1, k).astype(float)
    cand = cand[cand.any(axis=1)]
    m = dmse_quadratic_matrix(h, snr)
    gamma = cfg.theta / (1.0 + 2.0 * sigma_q2)
    quad = np.einsum("ij,jk,ik->i", cand, m, cand)

    totals = cand.sum(axis=1)
    norm2 = (cand**2).sum(axis=1)
    sigmas = np.asarray(params.sigmas, dtype=float)
    quad_sq = cand**2 @ sigmas**2
    quad_sig = cand**2 @ sigmas
    qmse = (
        params.model_size
        / totals**2
        * (quad_sq - quad_sig**2 / ((1.0 + params.sigma_q2) * norm2))
    )
    sgd_noise = params.mu**2 * params.gradient_variance / params.batch_size * params.tau
    metric = sgd_noise * norm2 / totals**2 + qmse

    feasible = quad <= gamma + 1e-12
    if np.any(feasible):
        scores = np.where(feasible, metric, np.inf)
        idx = int(np.argmin(scores))
        fallback = False
    else:
        idx = int(np.argmin(quad))
        fallback = True
    a = cand[idx].astype(int)
    return CoefficientVector(a, float(metric[idx]), float(gamma - quad[idx]), fallback)
