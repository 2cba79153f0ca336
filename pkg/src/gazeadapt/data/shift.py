"""Photometric domain shift that turns rendered eyes into a target domain."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ConfigurationError


@dataclass(frozen=True)
class DomainShiftConfig:
    brightness_delta: float = 0.0
    contrast_gain: float = 1.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.contrast_gain > 0:
            raise ConfigurationError(f"contrast_gain must be > 0, got {self.contrast_gain}")
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be > 0, got {self.gamma}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigurationError("blur_sigma and noise_sigma must be >= 0")

    @property
    def is_identity(self) -> bool:
        return (self.brightness_delta == 0 and self.contrast_gain == 1 and self.blur_sigma == 0
                and self.noise_sigma == 0 and self.gamma == 1)

    def for_sample(self, index: int) -> "DomainShiftConfig":
        """Same shift with an independent noise stream for sample ``index``."""
        state = np.random.SeedSequence([self.seed, index]).generate_state(2, dtype=np.uint32)
        return replace(self, seed=int(state[0]) << 32 | int(state[1]))


def apply_domain_shift(image: np.ndarray, config: DomainShiftConfig) -> np.ndarray:
    """Affine contrast/brightness, gamma on the [0, 1] remap, blur, noise; clamp.

    Stages whose parameters are at their identity value are skipped, so the
    identity config returns a bit-identical copy.
    """
    out = np.array(image, dtype=np.float64, copy=True)
    if config.contrast_gain != 1 or config.brightness_delta != 0:
        out = config.contrast_gain * out + config.brightness_delta
    if config.gamma != 1:
        u = np.clip((out + 1.0) / 2.0, 0.0, 1.0)
        out = 2.0 * u**config.gamma - 1.0
    if config.blur_sigma > 0:
        out = gaussian_filter(out, sigma=config.blur_sigma, mode="nearest")
    if config.noise_sigma > 0:
        out = out + np.random.default_rng(config.seed).normal(0.0, config.noise_sigma, out.shape)
    return np.clip(out, -1.0, 1.0)
