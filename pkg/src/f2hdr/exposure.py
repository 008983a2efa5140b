"""Exposure/gamma domain transforms and the mu-law tonemap.

All transforms are computed in 64-bit internally and cast back to the
input dtype, which bounds the round-trip error budget of the inverse maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NegativeInput, NonPositiveExposure
from .tensorio import ExposureFrame


@dataclass
class TonemapConfig:
    mu: float = 5000.0

    def __post_init__(self):
        if self.mu <= 0:
            raise NegativeInput(f"mu must be > 0, got {self.mu}")


def ldr_to_hdr(frame: ExposureFrame) -> np.ndarray:
    """Map an LDR frame to the linear HDR domain: L**gamma / e."""
    if frame.exposure <= 0:
        raise NonPositiveExposure(f"exposure {frame.exposure} <= 0")
    out = frame.image.astype(np.float64) ** frame.gamma / frame.exposure
    return out.astype(frame.image.dtype)


def hdr_to_ldr(image, exposure, gamma=2.2) -> np.ndarray:
    """Inverse of ldr_to_hdr: clip((I * e) ** (1/gamma)) into [0, 1]."""
    if exposure <= 0:
        raise NonPositiveExposure(f"exposure {exposure} <= 0")
    image = np.asarray(image)
    out = np.clip(image.astype(np.float64) * exposure, 0.0, None) ** (1.0 / gamma)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def exposure_normalize(frame: ExposureFrame, target_exposure: float) -> np.ndarray:
    """Re-render an LDR frame at another exposure: clip(((L**g / e) * e')**(1/g)).

    Saturated values clamp to 1, so the map is lossy whenever the target
    exposure is higher than the source.
    """
    if frame.exposure <= 0 or target_exposure <= 0:
        raise NonPositiveExposure(
            f"exposures must be > 0, got {frame.exposure}, {target_exposure}"
        )
    if target_exposure == frame.exposure:
        return frame.image.copy()
    lin = frame.image.astype(np.float64) ** frame.gamma / frame.exposure
    out = (lin * target_exposure) ** (1.0 / frame.gamma)
    return np.clip(out, 0.0, 1.0).astype(frame.image.dtype)


def tonemap_mu(image, cfg: TonemapConfig = TonemapConfig()) -> np.ndarray:
    """Mu-law tonemap T(H) = log(1 + mu*H) / log(1 + mu), a [0,1] bijection."""
    image = np.asarray(image)
    if image.size and float(image.min()) < 0:
        raise NegativeInput("tonemap input must be >= 0")
    out = np.log1p(cfg.mu * image.astype(np.float64)) / np.log1p(cfg.mu)
    return out.astype(image.dtype)


def tonemap_mu_derivative(image, cfg: TonemapConfig = TonemapConfig()) -> np.ndarray:
    """Analytic dT/dH = mu / ((1 + mu*H) * log(1 + mu))."""
    image = np.asarray(image)
    if image.size and float(image.min()) < 0:
        raise NegativeInput("tonemap input must be >= 0")
    out = cfg.mu / ((1.0 + cfg.mu * image.astype(np.float64)) * np.log1p(cfg.mu))
    return out.astype(image.dtype)


def tonemap_mu_inverse(image, cfg: TonemapConfig = TonemapConfig()) -> np.ndarray:
    """Inverse tonemap T^-1(y) = (exp(y * log(1 + mu)) - 1) / mu."""
    image = np.asarray(image)
    out = np.expm1(image.astype(np.float64) * np.log1p(cfg.mu)) / cfg.mu
    return out.astype(image.dtype)
