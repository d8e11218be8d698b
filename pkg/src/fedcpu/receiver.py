"""Server-side two-layer receiver.

Layer 1 equalizes the stacked real received matrix and decodes an integer
combination of the devices' quantized updates as a lattice point.  Layer 2
removes the dithers, rescales by an optimized normalizer, and restores the
means to produce an unbiased estimate of the weighted global update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .channel import ChannelRealization
from .errors import ConfigurationError
from .lattices import LatticeSpec, quantize_blocks, shortest_vector_norm


@dataclass
class DecodedCombination:
    """Layer-1 output: the decoded lattice point claimed to equal a^T W_bar.

    ``decode_error`` is simulation-only instrumentation, available when the
    ground-truth combination is supplied; the production path never needs it.
    """

    point: np.ndarray
    a: np.ndarray
    decode_error: bool | None = None


@dataclass
class GlobalUpdateEstimate:
    """Layer-2 output with the normalizer and error diagnostics used."""

    delta_w_g: np.ndarray
    eta: float
    dmse: float
    qmse: float


def optimal_equalizer(h: ChannelRealization, a: np.ndarray, snr: float) -> np.ndarray:
    """Equalizer minimizing the decoding MSE for coefficient vector a.

    b^T = a^T H^T ((1/SNR) I + H H^T)^{-1}; the system matrix is positive
    definite, so a Cholesky solve is both safe and deterministic.
    """
    a = np.asarray(a, dtype=float)
    if not np.any(a):
        raise ConfigurationError("coefficient vector must be nonzero")
    H = h.h_real
    gram = H @ H.T
    gram[np.diag_indices_from(gram)] += 1.0 / snr
    return scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram, lower=True), H @ a)


def equalizer_stationarity_residual(
    h: ChannelRealization, b: np.ndarray, a: np.ndarray, snr: float
) -> float:
    """Norm of the decoding-MSE gradient 2HH^T b - 2Ha + (2/SNR) b at b."""
    H = h.h_real
    return float(np.linalg.norm(2.0 * H @ (H.T @ b) - 2.0 * H @ a + (2.0 / snr) * b))


def decoding_mse(
    h: ChannelRealization, a: np.ndarray, snr: float, sigma_q2: float, s: int
) -> float:
    """Decoding MSE at the optimal equalizer.

    Equals s*(1+2*sigma_q^2) * a^T (I + SNR * H^T H)^{-1} a, the variance of the
    effective noise when recovering the integer combination.
    """
    a = np.asarray(a, dtype=float)
    if not np.any(a):
        raise ConfigurationError("coefficient vector must be nonzero")
    H = h.h_real
    m = snr * (H.T @ H)
    m[np.diag_indices_from(m)] += 1.0
    sol = scipy.linalg.cho_solve(scipy.linalg.cho_factor(m, lower=True), a)
    return float(s * (1.0 + 2.0 * sigma_q2) * (a @ sol))


def decoding_mse_at(
    h: ChannelRealization, b: np.ndarray, a: np.ndarray, snr: float, sigma_q2: float, s: int
) -> float:
    """Decoding MSE of an arbitrary equalizer b (the pre-optimization form)."""
    H = h.h_real
    mismatch = b @ H - np.asarray(a, dtype=float)
    return float(s * (1.0 + 2.0 * sigma_q2) * (mismatch @ mismatch + (b @ b) / snr))


def decode_combination(
    received: np.ndarray,
    b: np.ndarray,
    lattice: LatticeSpec,
    power: float,
    sigma_q2: float,
    a: np.ndarray,
    true_point: np.ndarray | None = None,
) -> DecodedCombination:
    """Scale the equalized stream and quantize it blockwise to a lattice point.

    When ``true_point`` (the ground-truth a^T W_bar, known in simulation) is
    given, the decode-error flag records whether any other lattice point was
    decoded.
    """
    received = np.asarray(received, dtype=float)
    b = np.asarray(b, dtype=float)
    if received.ndim != 2 or received.shape[0] != b.size:
        raise ConfigurationError(
            f"received matrix must be ({b.size}, s), got {received.shape}"
        )
    y = np.sqrt((1.0 + 2.0 * sigma_q2) / power) * (b @ received)
    point = quantize_blocks(lattice, y)
    error: bool | None = None
    if true_point is not None:
        # Distinct lattice points are at least one shortest vector apart, so an
        # absolute tolerance far below that separates float noise from errors.
        tol = 1e-6 * shortest_vector_norm(lattice)
        error = not np.allclose(point, true_point, rtol=0.0, atol=tol)
    return DecodedCombination(point, np.asarray(a), error)


def optimal_eta(a: np.ndarray, sigmas: np.ndarray, sigma_q2: float) -> float:
    """Normalizer minimizing the quantization MSE for coefficient vector a."""
    a = np.asarray(a, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if np.any(a < 0) or not np.any(a):
        raise ConfigurationError("coefficients must be non-negative and not all zero")
    if np.any(sigmas <= 0):
        raise ConfigurationError("per-device standard deviations must be positive")
    return float((1.0 + sigma_q2) * (a @ a) / (a @ (sigmas * a)))


def quantization_mse(a: np.ndarray, sigmas: np.ndarray, sigma_q2: float, s: int) -> float:
    """Quantization MSE at the optimal normalizer."""
    a = np.asarray(a, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    total = a.sum()
    quad_sq = a @ (sigmas**2 * a)
    quad = a @ (sigmas * a)
    return float(s / total**2 * (quad_sq - quad**2 / ((1.0 + sigma_q2) * (a @ a))))


def quantization_mse_at(
    a: np.ndarray, sigmas: np.ndarray, sigma_q2: float, s: int, eta: float
) -> float:
    """Quantization MSE of an arbitrary normalizer eta (pre-optimization form)."""
    a = np.asarray(a, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    resid = (1.0 / eta - sigmas) * a
    return float(s / a.sum() ** 2 * (resid @ resid + (a @ a) * sigma_q2 / eta**2))


def estimate_global_update(
    decoded: DecodedCombination,
    dithers: np.ndarray,
    a: np.ndarray,
    means: np.ndarray,
    eta: float,
    dmse: float = 0.0,
    qmse: float = 0.0,
) -> GlobalUpdateEstimate:
    """Layer 2: dither removal, normalization, and mean restoration.

    delta_w_G = (point - a^T D) / (eta * 1^T a) + (sum_k a_k * mean_k / 1^T a) * 1.
    ``dithers`` is the server's reconstruction of the K x s device dithers from
    the shared randomness.  Unbiased for the a-weighted average of the device
    updates whenever the decode was correct.
    """
    a = np.asarray(a, dtype=float)
    dithers = np.asarray(dithers, dtype=float)
    means = np.asarray(means, dtype=float)
    total = a.sum()
    if total == 0:
        raise ConfigurationError("coefficient vector sums to zero")
    if eta <= 0:
        raise ConfigurationError("eta must be positive")
    centered = (decoded.point - a @ dithers) / (eta * total)
    delta = centered + (a @ means) / total
    return GlobalUpdateEstimate(delta, eta, dmse, qmse)
