"""Multi-antenna fading multiple-access channel simulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass
class ChannelConfig:
    """Uplink channel parameters.

    ``snr`` is the linear ratio P / sigma_z^2 and ``power`` the per-dimension
    transmit budget P.  Fading is block fading: one realization per round,
    constant across the s symbols.  ``fading_scale`` is the mean of the
    exponential power-gain law (numpy's ``scale`` convention); the phase is
    uniform on [0, 2*pi).
    """

    num_antennas: int
    num_devices: int
    snr: float = 10.0
    power: float = 1.0
    fading_scale: float = 5.0

    def __post_init__(self) -> None:
        if self.num_antennas < 1 or self.num_devices < 1:
            raise ConfigurationError("need at least one antenna and one device")
        if self.snr <= 0 or self.power <= 0 or self.fading_scale <= 0:
            raise ConfigurationError("snr, power and fading_scale must be positive")

    @property
    def noise_variance(self) -> float:
        """Noise variance per real component, sigma_z^2 = P / SNR."""
        return self.power / self.snr


@dataclass
class ChannelRealization:
    """Complex M x K channel and its stacked real form [Re; Im] (2M x K)."""

    h_complex: np.ndarray
    h_real: np.ndarray


def stack_real(h_complex: np.ndarray) -> np.ndarray:
    return np.vstack([h_complex.real, h_complex.imag])


def sample_channel(cfg: ChannelConfig, rng: np.random.Generator) -> ChannelRealization:
    """Draw one i.i.d. block-fading realization.

    Each entry is g * exp(j*phi) with power gain g^2 ~ Exponential(fading_scale)
    and phi ~ U(0, 2*pi), independent across antennas, devices and rounds.
    """
    shape = (cfg.num_antennas, cfg.num_devices)
    power_gain = rng.exponential(cfg.fading_scale, size=shape)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    h = np.sqrt(power_gain) * np.exp(1j * phase)
    return ChannelRealization(h, stack_real(h))


def propagate(
    h: ChannelRealization,
    transmit: np.ndarray,
    noise_variance: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Superimpose the K x s transmit matrix through the channel: Y = H X + Z.

    Z has i.i.d. zero-mean Gaussian entries with variance ``noise_variance``
    per real component.  The noise draw always consumes the same number of rng
    variates, so a zero-noise run stays aligned with a noisy one.
    """
    transmit = np.asarray(transmit, dtype=float)
    if noise_variance < 0:
        raise ConfigurationError("noise variance must be non-negative")
    two_m, k = h.h_real.shape
    if transmit.ndim != 2 or transmit.shape[0] != k:
        raise ConfigurationError(
            f"transmit matrix must be ({k}, s), got {transmit.shape}"
        )
    noise = rng.standard_normal((two_m, transmit.shape[1]))
    return h.h_real @ transmit + np.sqrt(noise_variance) * noise
