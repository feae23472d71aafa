"""Acquisition operators: centered FFT, Cartesian masking, and KB-gridding NUFFT.

Conventions
-----------
* Images are ``(..., H, W)`` complex arrays; pixel ``(i, j)`` sits at centered
  position ``(i - H/2, j - W/2)``.
* k-space coordinates are in cycles/pixel, ``kx`` along W and ``ky`` along H,
  both in ``[-0.5, 0.5)``.
* ``norm="ortho"`` scales every transform by ``1/sqrt(H*W)`` so that the
  Cartesian forward operator with full sampling is unitary and radial samples
  share the Cartesian scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import i0

from .errors import DataValidationError, ShapeError

KB_OVERSAMP = 2.0
KB_WIDTH = 6


def _check_finite(x, name="input"):
    if not np.all(np.isfinite(x)):
        raise DataValidationError(f"{name} contains non-finite values")


def fft2c(x):
    """Centered orthonormal 2D DFT over the last two axes."""
    x = np.asarray(x)
    _check_finite(x, "image")
    if x.ndim < 2:
        raise ShapeError("fft2c needs at least 2 dims")
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(x, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


def ifft2c(k):
    """Inverse of :func:`fft2c` (and its adjoint)."""
    k = np.asarray(k)
    _check_finite(k, "k-space")
    if k.ndim < 2:
        raise ShapeError("ifft2c needs at least 2 dims")
    axes = (-2, -1)
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(k, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


# -- sampling descriptors ---------------------------------------------------


@dataclass
class CartesianMask:
    """Phase-encode line mask; ``kept[ky, t]`` is True when line ky is acquired in frame t."""

    kept: np.ndarray

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=bool)
        if self.kept.ndim != 2:
            raise ShapeError("mask must be H x T")
        if not self.kept.any(axis=0).all():
            raise DataValidationError("every frame must keep at least one line")

    @property
    def n_lines(self):
        return self.kept.shape[0]

    @property
    def n_frames(self):
        return self.kept.shape[1]

    def column(self, t):
        return self.kept[:, t]

    def acceleration(self):
        return self.kept.size / self.kept.sum()


@dataclass
class RadialTrajectory:
    """Golden-angle radial sampling.

    ``angles`` is ``(T, S)`` in radians, ``coords`` is ``(T, S, R, 2)`` with
    ``(kx, ky)`` in the last axis, ``density`` is ``(T, S, R)``.
    """

    angles: np.ndarray
    coords: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.density = np.asarray(self.density, dtype=np.float64)
        T, S = self.angles.shape
        if self.coords.shape[:2] != (T, S) or self.coords.shape[-1] != 2:
            raise ShapeError("coords must be (T, S, R, 2) matching angles")
        if self.density.shape != self.coords.shape[:-1]:
            raise ShapeError("density must be (T, S, R)")
        if np.any(self.density < 0):
            raise DataValidationError("density weights must be nonnegative")

    @property
    def n_frames(self):
        return self.angles.shape[0]

    @property
    def spokes_per_frame(self):
        return self.angles.shape[1]

    @property
    def readout(self):
        return self.coords.shape[2]

    def frame_coords(self, t):
        return self.coords[t].reshape(-1, 2)

    def frame_density(self, t):
        return self.density[t].reshape(-1)


def check_coils(coils, shape=None, atol=1e-6):
    coils = np.asarray(coils)
    if coils.ndim != 3:
        raise ShapeError("coil maps must be (C, H, W)")
    if shape is not None and coils.shape[1:] != tuple(shape):
        raise ShapeError(f"coil maps {coils.shape[1:]} do not match image {tuple(shape)}")
    sos = np.sum(np.abs(coils) ** 2, axis=0)
    if not np.allclose(sos, 1.0, atol=atol):
        raise DataValidationError("coil sensitivities are not normalized (sum |S|^2 != 1)")
    return coils


# -- Cartesian --------------------------------------------------------------


def _check_cartesian(x, coils, mask_col):
    mask_col = np.asarray(mask_col, dtype=bool)
    if x.ndim != 2:
        raise ShapeError("image must be H x W")
    if coils.ndim != 3 or coils.shape[1:] != x.shape:
        raise ShapeError(f"coils {coils.shape} incompatible with image {x.shape}")
    if mask_col.shape != (x.shape[0],):
        raise ShapeError(f"mask column {mask_col.shape} incompatible with H={x.shape[0]}")
    if not mask_col.any():
        raise DataValidationError("mask keeps no lines")
    return mask_col


def apply_forward_cartesian(x, coils, mask_col):
    """``M F S_c x`` for every coil; returns ``(C, kept_lines, W)``.

    Kept lines are ordered by ascending ky, readout by ascending kx.
    """
    x = np.asarray(x)
    coils = np.asarray(coils)
    mask_col = _check_cartesian(x, coils, mask_col)
    return fft2c(coils * x[None])[:, mask_col, :]


def apply_adjoint_cartesian(y, coils, mask_col):
    coils = np.asarray(coils)
    y = np.asarray(y)
    mask_col = np.asarray(mask_col, dtype=bool)
    C, H, W = coils.shape
    if mask_col.shape != (H,):
        raise ShapeError("mask column does not match coil maps")
    if y.shape != (C, int(mask_col.sum()), W):
        raise ShapeError(f"samples {y.shape} expected {(C, int(mask_col.sum()), W)}")
    full = np.zeros((C, H, W), dtype=np.result_type(y, coils))
    full[:, mask_col, :] = y
    return np.sum(np.conj(coils) * ifft2c(full), axis=0)


# -- Kaiser-Bessel gridding NUFFT -------------------------------------------


def kb_beta(width=KB_WIDTH, oversamp=KB_OVERSAMP):
    """Shape parameter from Beatty et al. for a given width/oversampling."""
    return np.pi * np.sqrt((width / oversamp) ** 2 * (oversamp - 0.5) ** 2 - 0.8)


def kaiser_bessel(u, width=KB_WIDTH, beta=None):
    beta = kb_beta(width) if beta is None else beta
    u = np.asarray(u, dtype=np.float64)
    arg = 1.0 - (2.0 * u / width) ** 2
    out = np.zeros_like(u)
    inside = arg >= 0
    out[inside] = i0(beta * np.sqrt(arg[inside]))
    return out


def kaiser_bessel_ft(nu, width=KB_WIDTH, beta=None):
    """Continuous Fourier transform of :func:`kaiser_bessel` at frequency ``nu``
    (cycles per grid unit)."""
    beta = kb_beta(width) if beta is None else beta
    nu = np.asarray(nu, dtype=np.float64)
    z = beta**2 - (np.pi * width * nu) ** 2
    out = np.empty_like(nu)
    pos = z > 0
    r = np.sqrt(np.abs(z))
    out[pos] = width * np.sinh(r[pos]) / r[pos]
    neg = z < 0
    out[neg] = width * np.sin(r[neg]) / r[neg]
    out[z == 0] = width
    return out


def _check_coords(coords):
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError("trajectory coordinates must be (M, 2)")
    _check_finite(coords, "trajectory")
    if np.any(coords < -0.5 - 1e-12) or np.any(coords > 0.5 + 1e-12):
        raise DataValidationError("trajectory coordinates outside [-0.5, 0.5)")
    return coords


class NufftPlan:
    """Precomputed gridding operator for one set of k-space locations.

    Forward: deapodize, zero-pad to the oversampled grid, centered FFT, then
    interpolate onto the samples with a separable KB kernel. The adjoint runs
    the same steps transposed, so the pair passes the dot test to rounding.
    """

    def __init__(self, coords, shape, oversamp=KB_OVERSAMP, width=KB_WIDTH, norm="ortho"):
        self.coords = _check_coords(coords)
        self.shape = (int(shape[0]), int(shape[1]))
        H, W = self.shape
        if H < 4 or W < 4:
            raise DataValidationError("image must be at least 4 x 4")
        if norm not in ("ortho", None):
            raise ValueError(f"unknown norm {norm!r}")
        self.norm = norm
        self.width = int(width)
        self.beta = kb_beta(width, oversamp)
        self.grid = (int(round(oversamp * H)), int(round(oversamp * W)))
        Kh, Kw = self.grid
        self.scale = 1.0 / np.sqrt(H * W) if norm == "ortho" else 1.0

        ny = np.arange(H) - H // 2
        nx = np.arange(W) - W // 2
        apod_y = kaiser_bessel_ft(ny / Kh, width, self.beta)
        apod_x = kaiser_bessel_ft(nx / Kw, width, self.beta)
        self.deapod = 1.0 / np.outer(apod_y, apod_x)

        M = self.coords.shape[0]
        gy = self.coords[:, 1] * Kh
        gx = self.coords[:, 0] * Kw
        # J nearest grid nodes per axis
        offs = np.arange(self.width) - (self.width - 1) / 2.0
        my = np.floor(gy[:, None] + offs[None, :] + 0.5).astype(np.int64)
        mx = np.floor(gx[:, None] + offs[None, :] + 0.5).astype(np.int64)
        wy = kaiser_bessel(gy[:, None] - my, width, self.beta)
        wx = kaiser_bessel(gx[:, None] - mx, width, self.beta)
        iy = (my + Kh // 2) % Kh
        ix = (mx + Kw // 2) % Kw
        rows = np.repeat(np.arange(M), self.width * self.width)
        cols = (iy[:, :, None] * Kw + ix[:, None, :]).reshape(-1)
        vals = (wy[:, :, None] * wx[:, None, :]).reshape(-1)
        self.interp = sp.csr_matrix((vals, (rows, cols)), shape=(M, Kh * Kw))
        self.interp.sum_duplicates()
        self._interp_t = self.interp.T.tocsr()
        self._cache32 = None

    @property
    def n_samples(self):
        return self.coords.shape[0]

    def _mats(self, dtype):
        if np.dtype(dtype) == np.complex64:
            if self._cache32 is None:
                self._cache32 = (
                    self.interp.astype(np.float32),
                    self._interp_t.astype(np.float32),
                    self.deapod.astype(np.float32),
                )
            return self._cache32
        return self.interp, self._interp_t, self.deapod

    def forward(self, x):
        """``(..., H, W)`` image(s) -> ``(..., M)`` samples."""
        x = np.asarray(x)
        if x.shape[-2:] != self.shape:
            raise ShapeError(f"image {x.shape[-2:]} does not match plan {self.shape}")
        _check_finite(x, "image")
        cdtype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
        interp, _, deapod = self._mats(cdtype)
        H, W = self.shape
        Kh, Kw = self.grid
        lead = x.shape[:-2]
        pad = np.zeros(lead + self.grid, dtype=cdtype)
        y0, x0 = Kh // 2 - H // 2, Kw // 2 - W // 2
        pad[..., y0:y0 + H, x0:x0 + W] = x * deapod
        axes = (-2, -1)
        k = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(pad, axes=axes), axes=axes), axes=axes)
        k = k.reshape(-1, Kh * Kw)
        out = (interp @ k.T).T * self.scale
        return out.reshape(lead + (self.n_samples,)).astype(cdtype, copy=False)

    def adjoint(self, y, weights=None):
        """``(..., M)`` samples -> ``(..., H, W)``; ``weights`` pre-multiplies the samples."""
        y = np.asarray(y)
        if y.shape[-1] != self.n_samples:
            raise ShapeError(f"{y.shape[-1]} samples given, plan has {self.n_samples}")
        _check_finite(y, "samples")
        cdtype = np.complex64 if y.dtype in (np.float32, np.complex64) else np.complex128
        _, interp_t, deapod = self._mats(cdtype)
        if weights is not None:
            weights = np.asarray(weights)
            if weights.shape != (self.n_samples,):
                raise ShapeError("density weights do not match sample count")
            y = y * weights
        H, W = self.shape
        Kh, Kw = self.grid
        lead = y.shape[:-1]
        g = (interp_t @ y.reshape(-1, self.n_samples).T).T.reshape(lead + self.grid)
        axes = (-2, -1)
        img = np.fft.fftshift(
            np.fft.ifft2(np.fft.ifftshift(g, axes=axes), axes=axes, norm="forward"), axes=axes
        )
        y0, x0 = Kh // 2 - H // 2, Kw // 2 - W // 2
        img = img[..., y0:y0 + H, x0:x0 + W] * deapod * self.scale
        return img.astype(cdtype, copy=False)


def nufft_forward(x, coords, norm="ortho"):
    """Non-uniform DFT ``sum_p x(p) exp(-2 pi i k.p)`` by KB gridding.

    With ``norm="ortho"`` the result is additionally scaled by ``1/sqrt(H W)``
    so it lines up with :func:`fft2c`.
    """
    x = np.asarray(x)
    return NufftPlan(coords, x.shape[-2:], norm=norm).forward(x)


def nufft_adjoint(samples, coords, shape, density_comp=None, norm="ortho"):
    return NufftPlan(coords, shape, norm=norm).adjoint(samples, weights=density_comp)


def radial_density(coords, n_spokes, shape):
    """Ram-Lak weights ``|k|`` for one frame, floored at the DC sample weight.

    ``coords`` is ``(S, R, 2)``. Weights are scaled so that a fully sampled
    radial acquisition gives ``A^H W A ~ I`` under the orthonormal convention.
    """
    coords = np.asarray(coords, dtype=np.float64)
    R = coords.shape[-2]
    dk = 1.0 / R
    kr = np.hypot(coords[..., 0], coords[..., 1])
    # DC cell: disc of radius dk/2 shared by every spoke -> dk/4 in ramp units
    w = np.maximum(kr, dk / 4.0)
    H, W = shape
    return w * (np.pi * dk * H * W / n_spokes)


# -- multi-coil, multi-frame acquisition ------------------------------------


def _coils_as(coils, ref):
    """Coil maps cast to the complex precision of ``ref``."""
    return coils.astype(np.result_type(ref.dtype, np.complex64), copy=False)


class CartesianAcquisition:
    def __init__(self, mask: CartesianMask, coils):
        self.mask = mask
        self.coils = np.asarray(coils)
        if self.coils.shape[1] != mask.n_lines:
            raise ShapeError("mask line count does not match coil height")
        self.shape = self.coils.shape[1:]

    @property
    def n_frames(self):
        return self.mask.n_frames

    def sample_shape(self, t):
        return (self.coils.shape[0], int(self.mask.column(t).sum()), self.shape[1])

    def forward(self, x, t):
        x = np.asarray(x)
        return apply_forward_cartesian(x, _coils_as(self.coils, x), self.mask.column(t))

    def adjoint(self, y, t, density=False):
        y = np.asarray(y)
        return apply_adjoint_cartesian(y, _coils_as(self.coils, y), self.mask.column(t))


class RadialAcquisition:
    def __init__(self, traj: RadialTrajectory, coils):
        self.traj = traj
        self.coils = np.asarray(coils)
        self.shape = self.coils.shape[1:]
        self.plans = [NufftPlan(traj.frame_coords(t), self.shape) for t in range(traj.n_frames)]

    @property
    def n_frames(self):
        return self.traj.n_frames

    def sample_shape(self, t):
        return (self.coils.shape[0], self.plans[t].n_samples)

    def forward(self, x, t):
        x = np.asarray(x)
        if x.shape != self.shape:
            raise ShapeError(f"image {x.shape} does not match coils {self.shape}")
        return self.plans[t].forward(_coils_as(self.coils, x) * x[None])

    def adjoint(self, y, t, density=False):
        w = self.traj.frame_density(t) if density else None
        img = self.plans[t].adjoint(y, weights=w)
        return np.sum(np.conj(_coils_as(self.coils, img)) * img, axis=0)


def make_acquisition(sampling, coils):
    if isinstance(sampling, CartesianMask):
        return CartesianAcquisition(sampling, coils)
    if isinstance(sampling, RadialTrajectory):
        return RadialAcquisition(sampling, coils)
    raise TypeError(f"unsupported sampling descriptor {type(sampling).__name__}")


def apply_forward_multi(frames, coils, sampling, noise_sigma=0.0, rng=None):
    """Simulate ``y_{t,c} = M_t F S_c x_t + n_{t,c}`` for a whole sequence.

    Returns an array ``(T, C, lines, W)`` for Cartesian or ``(T, C, S*R)`` for
    radial sampling. Noise is circular complex Gaussian with
    ``E|n|^2 = noise_sigma^2``.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ShapeError("frames must be (T, H, W)")
    acq = make_acquisition(sampling, coils)
    if frames.shape[0] != acq.n_frames:
        raise ShapeError(f"{frames.shape[0]} frames but sampling describes {acq.n_frames}")
    y = np.stack([acq.forward(frames[t], t) for t in range(frames.shape[0])])
    if noise_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        std = noise_sigma / np.sqrt(2.0)
        y = y + std * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return y
