"""Procedural eye renderer used as the labelled synthetic source domain.

The renderer draws, at 4x supersampling and then box-averaged down to
35x55: skin with a vertical shading ramp and seeded texture, an almond
shaped eye opening bounded by two parabolic lids, sclera, an iris disc
(foreshortened by the gaze's z component along the in-image gaze
direction), a pupil, a lash line and a corneal glint.

Iris placement is a pinhole projection of the gaze direction::

    iris_center = image_center + PROJECTION_C * (gx / gz, gy / gz)

with ``PROJECTION_C = 20`` pixels. Image coordinates are continuous, pixel
``(r, c)`` covering ``[r, r+1) x [c, c+1)``, so the image centre is
(17.5, 27.5) and lies in the middle of pixel (17, 27).

Style parameters (intensities are in the [-1, 1] image range):

    =============== ============== ===========================================
    field           sampled range  meaning
    =============== ============== ===========================================
    skin            [0.00, 0.45]   skin intensity
    sclera          [0.55, 0.90]   sclera intensity
    iris            [-0.55, -0.15] iris intensity
    pupil           [-0.95, -0.80] pupil intensity
    iris_radius     [6.0, 7.5]     px
    pupil_frac      [0.35, 0.50]   pupil radius / iris radius
    half_width      [21, 25]       px, half eye-opening width
    upper_lid       [9, 12]        px, upper lid height above centre
    lower_lid       [7, 10]        px, lower lid depth below centre
    glint_dx        [-3, 3]        px, glint offset from centre
    glint_dy        [-4, -1]       px
    glint           1.0            glint intensity, 0 disables it
    texture         0.03           std of skin texture noise
    =============== ============== ===========================================
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from ..errors import GazeDomainError

IMAGE_H, IMAGE_W = 35, 55
CENTER_ROW, CENTER_COL = IMAGE_H / 2.0, IMAGE_W / 2.0
PROJECTION_C = 20.0
SUPERSAMPLE = 4

STYLE_RANGES = {
    "skin": (0.0, 0.45),
    "sclera": (0.55, 0.90),
    "iris": (-0.55, -0.15),
    "pupil": (-0.95, -0.80),
    "iris_radius": (6.0, 7.5),
    "pupil_frac": (0.35, 0.50),
    "half_width": (21.0, 25.0),
    "upper_lid": (9.0, 12.0),
    "lower_lid": (7.0, 10.0),
    "glint_dx": (-3.0, 3.0),
    "glint_dy": (-4.0, -1.0),
}


@dataclass(frozen=True)
class EyeStyle:
    skin: float = 0.25
    sclera: float = 0.75
    iris: float = -0.35
    pupil: float = -0.9
    iris_radius: float = 6.75
    pupil_frac: float = 0.42
    half_width: float = 23.0
    upper_lid: float = 10.5
    lower_lid: float = 8.5
    glint_dx: float = 0.0
    glint_dy: float = -2.5
    glint: float = 1.0
    texture: float = 0.03

    def as_dict(self):
        return asdict(self)


def sample_style(rng: np.random.Generator) -> EyeStyle:
    # one uniform draw per field, in STYLE_RANGES order
    return EyeStyle(**{k: float(rng.uniform(lo, hi)) for k, (lo, hi) in STYLE_RANGES.items()})


def iris_center(gaze) -> tuple[float, float]:
    """(row, col) of the projected iris centre in continuous image coordinates."""
    g = _check_gaze(gaze)
    return (CENTER_ROW + PROJECTION_C * g[1] / g[2], CENTER_COL + PROJECTION_C * g[0] / g[2])


def _check_gaze(gaze) -> np.ndarray:
    g = np.asarray(gaze, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(g) - 1.0) > 1e-6:
        raise GazeDomainError(f"gaze must be a unit vector, |g| = {np.linalg.norm(g)}")
    if g[2] <= 0.0:
        raise GazeDomainError(f"gaze points away from the camera (gz = {g[2]})")
    return g


@lru_cache(maxsize=1)
def _fine_grid():
    s = SUPERSAMPLE
    ys = (np.arange(IMAGE_H * s) + 0.5) / s
    xs = (np.arange(IMAGE_W * s) + 0.5) / s
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    yy.setflags(write=False)
    xx.setflags(write=False)
    return yy, xx


def _downsample(a: np.ndarray) -> np.ndarray:
    s = SUPERSAMPLE
    return a.reshape(IMAGE_H, s, IMAGE_W, s).mean(axis=(1, 3))


def generate_synthetic_eye(gaze, style: EyeStyle | None = None, seed: int = 0) -> np.ndarray:
    """Render one 35x55 eye image in [-1, 1] (float64) looking along ``gaze``."""
    g = _check_gaze(gaze)
    st = style or EyeStyle()
    yy, xx = _fine_grid()
    cy, cx = CENTER_ROW, CENTER_COL

    dx = xx - cx
    lid = 1.0 - (dx / st.half_width) ** 2
    top = cy - st.upper_lid * lid
    bottom = cy + st.lower_lid * lid
    aperture = (lid > 0) & (yy > top) & (yy < bottom)

    fine = st.skin + 0.12 * (yy / IMAGE_H - 0.5)
    lash = (lid > -0.05) & (yy <= top) & (yy > top - 1.3)
    fine = np.where(lash, st.skin - 0.55, fine)

    sclera = st.sclera - 0.18 * np.clip(dx / st.half_width, -1, 1) ** 2
    fine = np.where(aperture, sclera, fine)

    ir, ic = iris_center(g)
    du, dv = yy - ir, xx - ic
    planar = np.hypot(g[0], g[1])
    if planar > 0:
        ux, uy = g[0] / planar, g[1] / planar
        along = (dv * ux + du * uy) / g[2]
        across = -dv * uy + du * ux
        rho = np.hypot(along, across)
    else:
        rho = np.hypot(du, dv)
    rel = rho / st.iris_radius
    iris = aperture & (rel < 1.0)
    fine = np.where(iris, st.iris - 0.2 * rel**4, fine)
    fine = np.where(aperture & (rel < st.pupil_frac), st.pupil, fine)

    if st.glint > 0:
        glint = aperture & (np.hypot(yy - cy - st.glint_dy, xx - cx - st.glint_dx) < 1.2)
        fine = np.where(glint, st.glint, fine)

    img = _downsample(fine)
    if st.texture > 0:
        skin_cover = _downsample((~aperture & ~lash).astype(np.float64))
        noise = np.random.default_rng(seed).normal(0.0, st.texture, img.shape)
        img = img + skin_cover * noise
    return np.clip(img, -1.0, 1.0)
