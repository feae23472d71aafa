"""Undersampling patterns: variable-density ky-t masks and golden-angle radial spokes."""
from __future__ import annotations

import math

import numpy as np

from .errors import DataValidationError
from .kspace import CartesianMask, RadialTrajectory, radial_density

# 180 deg over the golden ratio; its supplement (3 - sqrt 5) * 90 deg gives the mirrored pattern
GOLDEN_ANGLE_DEG = 180.0 * (math.sqrt(5.0) - 1.0) / 2.0
GOLDEN_ANGLE = math.radians(GOLDEN_ANGLE_DEG)


def lines_per_frame(H, af):
    return max(1, int(math.floor(H / af + 0.5)))


def make_vista_mask(H, T, af, seed=0, sigma=None):
    """Variable-density, temporally complementary Cartesian mask of shape ``(H, T)``.

    Every frame keeps ``round(H / af)`` lines including the DC line ``H // 2``.
    The remaining lines are drawn without replacement from a Gaussian density
    centered on DC; lines used by the previous frame are excluded whenever
    enough other lines with nonzero density remain.
    """
    if not (1 <= af <= H):
        raise DataValidationError(f"acceleration factor must lie in [1, H={H}], got {af}")
    if T < 1:
        raise DataValidationError("need at least one frame")
    rng = np.random.default_rng(seed)
    n = lines_per_frame(H, af)
    dc = H // 2
    sigma = H / 6.0 if sigma is None else sigma
    ky = np.arange(H)
    density = np.exp(-0.5 * ((ky - dc) / sigma) ** 2)
    density[dc] = 0.0
    kept = np.zeros((H, T), dtype=bool)
    prev = np.zeros(H, dtype=bool)
    for t in range(T):
        kept[dc, t] = True
        if n > 1:
            w = density.copy()
            fresh = w * ~prev
            if np.count_nonzero(fresh) >= n - 1:
                w = fresh
            picks = rng.choice(H, size=n - 1, replace=False, p=w / w.sum())
            kept[picks, t] = True
        prev = kept[:, t].copy()
        prev[dc] = False
    return CartesianMask(kept)


def spoke_readout(R):
    """Uniform readout positions along a spoke diameter in cycles/pixel."""
    if R < 2 or R % 2:
        raise DataValidationError("readout length must be even and >= 2")
    return (np.arange(R) - R // 2) / R


def make_golden_angle_traj(spokes_per_frame, R, T, base_angle=0.0, shape=None):
    """Golden-angle radial trajectory; spoke ``s`` (global index) has angle
    ``base_angle + s * GOLDEN_ANGLE``.

    ``shape`` is the image size used to scale the density weights; it defaults
    to ``(R // 2, R // 2)`` (readouts are twice the matrix size).
    """
    if spokes_per_frame < 1:
        raise DataValidationError("need at least one spoke per frame")
    if T < 1:
        raise DataValidationError("need at least one frame")
    kr = spoke_readout(R)
    shape = (R // 2, R // 2) if shape is None else tuple(shape)
    s = np.arange(T * spokes_per_frame, dtype=np.float64)
    angles = (base_angle + s * GOLDEN_ANGLE).reshape(T, spokes_per_frame)
    # spokes cover the full diameter, so direction only matters modulo pi
    theta = np.mod(angles, np.pi)
    coords = np.stack(
        [np.cos(theta)[..., None] * kr, np.sin(theta)[..., None] * kr], axis=-1
    )
    density = radial_density(coords, spokes_per_frame, shape)
    return RadialTrajectory(angles=angles, coords=coords, density=density)


def nominal_radial_af(spokes_per_frame, n):
    """Nyquist spoke count ``pi/2 * n`` over the acquired spokes."""
    return (math.pi / 2.0) * n / spokes_per_frame
