"""Random gaze directions in camera coordinates.

Convention: x points right in the image, y points down, z points from the
eye towards the camera. A gaze looking straight into the lens is (0, 0, 1).
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError

OPTICAL_AXIS = np.array([0.0, 0.0, 1.0])


def _check_ranges(polar_range: float, azimuth_range: float) -> None:
    if not 0.0 <= polar_range < 90.0:
        raise ConfigurationError(f"polar range must lie in [0, 90) degrees, got {polar_range}")
    if not 0.0 < azimuth_range <= 90.0:
        raise ConfigurationError(f"azimuth range must lie in (0, 90] degrees, got {azimuth_range}")


def sample_gazes(rng: np.random.Generator, n: int, polar_range: float,
                 azimuth_range: float) -> np.ndarray:
    """Draw ``n`` unit gaze vectors, shape (n, 3).

    The polar angle (from the optical axis) is uniform in solid angle on
    ``[0, polar_range]``. The in-image direction is measured from the
    horizontal image axis and limited to ``±azimuth_range`` on either side
    (left- and right-looking gazes are equally likely), which keeps steep
    vertical gazes from hiding the iris under the eyelids.
    """
    _check_ranges(polar_range, azimuth_range)
    cos_max = np.cos(np.radians(polar_range))
    cos_t = 1.0 - rng.random(n) * (1.0 - cos_max)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    phi = np.radians(rng.uniform(-azimuth_range, azimuth_range, n))
    phi = phi + np.pi * (rng.random(n) < 0.5)
    g = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def sample_gaze(seed: int, polar_range: float, azimuth_range: float) -> np.ndarray:
    return sample_gazes(np.random.default_rng(seed), 1, polar_range, azimuth_range)[0]


def angle_from_axis_deg(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    return np.degrees(np.arccos(np.clip(g[..., 2] / np.linalg.norm(g, axis=-1), -1.0, 1.0)))
