"""Device-side transmit pipeline: normalization, dithered quantization, power scaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateUpdateError
from .lattices import LatticeSpec, quantize_blocks

# Stand-in standard deviation for constant (zero-gradient) updates.
SIGMA_FLOOR = 1e-12


@dataclass
class LocalUpdate:
    """Raw model update of one device for one round."""

    delta_w: np.ndarray
    device_id: int = 0


@dataclass
class NormalizedUpdate:
    """Zero-mean unit-variance update plus the (mean, std) side information."""

    w_hat: np.ndarray
    mean: float
    std: float


@dataclass
class TransmitSignal:
    """Power-scaled lattice point ready to go over the air."""

    x: np.ndarray
    quantized_point: np.ndarray
    dither: np.ndarray


def normalize_update(update: LocalUpdate) -> NormalizedUpdate:
    """Normalize an update to zero sample mean and unit sample variance.

    Uses the population (1/s) standard deviation.  The pair (mean, std) is the
    side information the device reports to the server error-free; the update is
    recovered exactly as ``std * w_hat + mean``.

    Raises DegenerateUpdateError for constant vectors (std = 0); callers that
    must proceed anyway should use :func:`normalize_or_floor`.
    """
    delta = np.asarray(update.delta_w, dtype=float)
    if delta.ndim != 1 or delta.size < 2:
        raise ConfigurationError("update must be a 1-D vector with at least 2 entries")
    if not np.all(np.isfinite(delta)):
        raise ValueError("update contains non-finite entries")
    mean = float(np.mean(delta))
    std = float(np.sqrt(np.mean((delta - mean) ** 2)))
    if std == 0.0:
        raise DegenerateUpdateError(f"constant update from device {update.device_id}")
    return NormalizedUpdate((delta - mean) / std, mean, std)


def normalize_or_floor(update: LocalUpdate) -> NormalizedUpdate:
    """Like normalize_update, but substitutes w_hat = 0 with a floored std
    for degenerate constant updates so a round never drops a device."""
    try:
        return normalize_update(update)
    except DegenerateUpdateError:
        delta = np.asarray(update.delta_w, dtype=float)
        return NormalizedUpdate(np.zeros_like(delta), float(delta[0]), SIGMA_FLOOR)


def dithered_quantize(
    nu: NormalizedUpdate, lattice: LatticeSpec, dither: np.ndarray
) -> np.ndarray:
    """Blockwise nearest lattice point of (w_hat + dither)."""
    w_hat = np.asarray(nu.w_hat, dtype=float)
    dither = np.asarray(dither, dtype=float)
    if w_hat.shape != dither.shape:
        raise ConfigurationError(
            f"dither shape {dither.shape} does not match update shape {w_hat.shape}"
        )
    return quantize_blocks(lattice, w_hat + dither)


def transmit_scale(power: float, sigma_q2: float) -> float:
    """Amplitude factor sqrt(P / (1 + 2*sigma_q^2)) applied to the lattice point."""
    if power <= 0:
        raise ConfigurationError(f"transmit power must be positive, got {power}")
    return float(np.sqrt(power / (1.0 + 2.0 * sigma_q2)))


def scale_for_transmit(
    w_bar: np.ndarray, power: float, sigma_q2: float, dither: np.ndarray
) -> TransmitSignal:
    """Scale the quantized point to meet the per-dimension power budget.

    Under unit-variance inputs and fresh dithers, E||x||^2 <= s * P with P the
    per-dimension power.
    """
    w_bar = np.asarray(w_bar, dtype=float)
    return TransmitSignal(transmit_scale(power, sigma_q2) * w_bar, w_bar, np.asarray(dither))


def pad_to_blocks(vec: np.ndarray, block_dim: int) -> np.ndarray:
    """Zero-pad a vector so its length is a multiple of the lattice block size.

    Padding happens after normalization, so the appended zeros do not disturb
    the (mean, std) side information; the receiver truncates them again.
    """
    vec = np.asarray(vec, dtype=float)
    rem = vec.size % block_dim
    if rem == 0:
        return vec
    return np.concatenate([vec, np.zeros(block_dim - rem)])
