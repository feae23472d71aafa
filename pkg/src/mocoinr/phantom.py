"""Analytic beating-heart phantom, simulated coils, and the k-t dataset container.

Geometry lives in normalized coordinates ``(x, y) in [0, 1]^2`` (x along W,
y along H). The reference configuration holds a body ellipse, a bright blood
pool of radius ``r_in0`` surrounded by a myocardial annulus out to ``r_out``,
and static disks. Frame ``t`` is rendered as ``x_t(p) = x_ref(p + u_t(p))``
with the analytic displacement ``u_t``, so the whole complex image (including
its smooth phase) moves with the tissue.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .errors import DataValidationError, ShapeError
from .kspace import (CartesianMask, RadialTrajectory, apply_forward_multi, check_coils,
                     make_acquisition)
from .sampling import make_golden_angle_traj, make_vista_mask

GENERATOR_VERSION = "1.0"
DATASET_MAGIC = b"KTDS"


@dataclass
class PhantomSpec:
    H: int = 64
    W: int = 64
    T: int = 16
    body_center: tuple = (0.5, 0.5)
    body_axes: tuple = (0.44, 0.36)
    body_intensity: float = 0.45
    heart_center: tuple = (0.44, 0.5)
    r_out: float = 0.17
    r_in0: float = 0.11
    myo_intensity: float = 0.3
    blood_intensity: float = 1.0
    alpha: float = 0.35
    disks: tuple = ((0.74, 0.38, 0.05, 0.8), (0.72, 0.64, 0.04, 0.6))
    supersample: int = 4

    def __post_init__(self):
        self.body_center = tuple(self.body_center)
        self.body_axes = tuple(self.body_axes)
        self.heart_center = tuple(self.heart_center)
        self.disks = tuple(tuple(d) for d in self.disks)

    def validate(self):
        if self.H < 4 or self.W < 4 or self.T < 1:
            raise DataValidationError("phantom needs H, W >= 4 and T >= 1")
        if not (0 <= self.alpha < 1):
            raise DataValidationError("contraction amplitude must satisfy 0 <= alpha < 1")
        if not (0 < self.r_in0 < self.r_out):
            raise DataValidationError("need 0 < r_in0 < r_out")
        cx, cy = self.heart_center
        if min(cx - self.r_out, cy - self.r_out) <= 0 or max(cx + self.r_out, cy + self.r_out) >= 1:
            raise DataValidationError("myocardial annulus escapes the field of view")
        for x, y, r, _ in self.disks:
            if min(x - r, y - r) <= 0 or max(x + r, y + r) >= 1:
                raise DataValidationError("static disk escapes the field of view")
            if math.hypot(x - cx, y - cy) < self.r_out + r:
                raise DataValidationError("static disk overlaps the moving heart")
        return self

    def to_dict(self):
        return asdict(self)


def systole_profile(t_idx, T):
    """Smooth periodic profile in [0, 1]; ``s(t) = s(T - t)``."""
    return np.sin(np.pi * np.asarray(t_idx, dtype=np.float64) / T) ** 2


def inner_radius(spec: PhantomSpec, t_idx):
    return spec.r_in0 * (1.0 - spec.alpha * systole_profile(t_idx, spec.T))


def reference_radius(spec, r, r_in):
    """Map a frame radius to its reference-configuration radius."""
    r_out, r_in0 = spec.r_out, spec.r_in0
    blood = r * (r_in0 / r_in)
    wall = r_out - (r_out - r) * (r_out - r_in0) / (r_out - r_in)
    return np.where(r < r_in, blood, np.where(r <= r_out, wall, r))


def radial_shift(spec, r, r_in):
    """``reference_radius(r) - r``, written so a static frame gives exact zeros."""
    r_out, r_in0 = spec.r_out, spec.r_in0
    blood = r * ((r_in0 - r_in) / r_in)
    wall = (r_out - r) * (r_in0 - r_in) / (r_out - r_in)
    return np.where(r < r_in, blood, np.where(r <= r_out, wall, 0.0))


def analytic_dvf(spec: PhantomSpec, points, t_idx):
    """Displacement ``u_t(p)`` at normalized ``points`` ``(..., 2)`` mapping the
    frame into the reference configuration."""
    c = np.asarray(spec.heart_center)
    d = points - c
    r = np.hypot(d[..., 0], d[..., 1])
    dr = radial_shift(spec, r, inner_radius(spec, t_idx))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(r > 0, dr / np.where(r > 0, r, 1.0), 0.0)
    return d * ratio[..., None]


def reference_phase(q):
    x = q[..., 0] - 0.5
    y = q[..., 1] - 0.5
    return (np.pi / 3) * (x + 0.6 * y) + 0.8 * (x * x - y * y)


def reference_image(spec: PhantomSpec, q):
    """Complex reference intensity at normalized points ``q`` ``(..., 2)``."""
    x, y = q[..., 0], q[..., 1]
    bx, by = spec.body_center
    ax, ay = spec.body_axes
    mag = np.where(((x - bx) / ax) ** 2 + ((y - by) / ay) ** 2 <= 1.0, spec.body_intensity, 0.0)
    for dx, dy, r, val in spec.disks:
        mag = np.where(np.hypot(x - dx, y - dy) <= r, val, mag)
    cx, cy = spec.heart_center
    rr = np.hypot(x - cx, y - cy)
    mag = np.where(rr <= spec.r_out, spec.myo_intensity, mag)
    mag = np.where(rr < spec.r_in0, spec.blood_intensity, mag)
    return mag * np.exp(1j * reference_phase(q))


def _supersample_points(H, W, n):
    off = (np.arange(n) + 0.5) / n
    ys = (np.arange(H)[:, None] + off[None, :]).reshape(-1) / H
    xs = (np.arange(W)[:, None] + off[None, :]).reshape(-1) / W
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([X, Y], axis=-1)  # (H*n, W*n, 2)


@dataclass
class Phantom:
    frames: np.ndarray  # (T, H, W) complex128
    roi: np.ndarray  # (H, W) bool
    dvf: np.ndarray  # (T, H, W, 2), normalized units at pixel centers
    spec: PhantomSpec = field(repr=False)


def make_phantom(spec: PhantomSpec) -> Phantom:
    spec.validate()
    H, W, T, n = spec.H, spec.W, spec.T, spec.supersample
    pts = _supersample_points(H, W, n)
    centers = np.stack(np.meshgrid((np.arange(W) + 0.5) / W, (np.arange(H) + 0.5) / H), axis=-1)
    frames = np.empty((T, H, W), dtype=np.complex128)
    dvf = np.empty((T, H, W, 2))
    for t in range(T):
        q = pts + analytic_dvf(spec, pts, t)
        hi = reference_image(spec, q)
        frames[t] = hi.reshape(H, n, W, n).mean(axis=(1, 3))
        dvf[t] = analytic_dvf(spec, centers, t)
    cx, cy = spec.heart_center
    rpx = np.hypot((centers[..., 0] - cx) * W, (centers[..., 1] - cy) * H)
    roi = rpx <= spec.r_out * min(H, W) + 2.0
    return Phantom(frames=frames, roi=roi, dvf=dvf, spec=spec)


def make_coils(H, W, C, seed=0):
    """Smooth Gaussian-profile coil maps with phase ramps, ``sum_c |S_c|^2 = 1``.

    Phases are referenced to coil 0, so a single coil is exactly ``S = 1``.
    """
    if C < 1:
        raise DataValidationError("need at least one coil")
    rng = np.random.default_rng(seed)
    y = (np.arange(H) + 0.5) / H
    x = (np.arange(W) + 0.5) / W
    Y, X = np.meshgrid(y, x, indexing="ij")
    maps = np.empty((C, H, W), dtype=np.complex128)
    for c in range(C):
        ang = 2 * np.pi * c / C + rng.uniform(-0.2, 0.2)
        cx, cy = 0.5 + 0.55 * np.cos(ang), 0.5 + 0.55 * np.sin(ang)
        mag = np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * 0.35**2))
        kx, ky = rng.uniform(-1.0, 1.0, size=2)
        maps[c] = mag * np.exp(1j * (kx * (X - 0.5) + ky * (Y - 0.5)) * np.pi)
    maps *= np.exp(-1j * np.angle(maps[0]))[None]
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))[None]
    return maps


# -- dataset -------------------------------------------------------------------


@dataclass
class KtDataset:
    samples: np.ndarray  # (T, C, lines, W) Cartesian or (T, C, S*R) radial, complex64
    sampling: CartesianMask | RadialTrajectory
    coils: np.ndarray  # (C, H, W) complex64
    noise_sigma: float = 0.0
    gt_frames: np.ndarray | None = None  # (T, H, W) complex64
    gt_dvf: np.ndarray | None = None  # (T, H, W, 2) float32
    roi: np.ndarray | None = None  # (H, W) bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        C, H, W = self.coils.shape
        T = self.sampling.n_frames
        if self.samples.shape[:2] != (T, C):
            raise ShapeError(f"samples {self.samples.shape} do not match T={T}, C={C}")
        if isinstance(self.sampling, CartesianMask):
            counts = self.sampling.kept.sum(axis=0)
            if self.sampling.n_lines != H or len(set(counts.tolist())) != 1:
                raise ShapeError("Cartesian datasets need H lines and a constant count per frame")
            if self.samples.shape[2:] != (int(counts[0]), W):
                raise ShapeError("sample array does not match the mask")
        else:
            m = self.sampling.spokes_per_frame * self.sampling.readout
            if self.samples.shape[2:] != (m,):
                raise ShapeError("sample array does not match the trajectory")
        if self.gt_frames is not None and self.gt_frames.shape != (T, H, W):
            raise ShapeError("ground-truth frames have the wrong shape")

    @property
    def shape(self):
        T = self.sampling.n_frames
        C, H, W = self.coils.shape
        return H, W, T, C

    @property
    def has_ground_truth(self):
        return self.gt_frames is not None

    @property
    def kind(self):
        return "cartesian" if isinstance(self.sampling, CartesianMask) else "radial"

    def acquisition(self, dtype=np.complex128):
        return make_acquisition(self.sampling, self.coils.astype(dtype))


def simulate(spec: PhantomSpec, sampling: dict, C=4, noise_sigma=0.0, seed=0) -> KtDataset:
    """Phantom -> coils -> sampled, optionally noisy, multi-coil k-t data.

    ``sampling`` is ``{"kind": "vista", "af": ...}`` or
    ``{"kind": "radial", "spokes": ..., "readout": ..., "base_angle": ...}``.
    Ground truth and coils are rounded to complex64 *before* the forward model
    so that replaying the stored arrays reproduces the stored samples.
    """
    ph = make_phantom(spec)
    H, W, T = spec.H, spec.W, spec.T
    coils = make_coils(H, W, C, seed=seed).astype(np.complex64)
    gt = ph.frames.astype(np.complex64)
    kind = sampling.get("kind")
    if kind == "vista":
        samp = make_vista_mask(H, T, sampling["af"], seed=seed)
    elif kind == "radial":
        R = int(sampling.get("readout") or 2 * max(H, W))
        samp = make_golden_angle_traj(sampling["spokes"], R, T,
                                      base_angle=float(sampling.get("base_angle", 0.0)), shape=(H, W))
    else:
        raise DataValidationError(f"unknown sampling kind {kind!r}")
    rng = np.random.default_rng([seed, 1])
    y = apply_forward_multi(gt.astype(np.complex128), coils.astype(np.complex128), samp,
                            noise_sigma=noise_sigma, rng=rng)
    meta = {
        "generator_version": GENERATOR_VERSION,
        "seed": int(seed),
        "sampling": dict(sampling),
        "phantom": spec.to_dict(),
        "coils": int(C),
    }
    return KtDataset(samples=y.astype(np.complex64), sampling=samp, coils=coils,
                     noise_sigma=float(noise_sigma), gt_frames=gt,
                     gt_dvf=ph.dvf.astype(np.float32), roi=ph.roi, meta=meta)


def replay(ds: KtDataset):
    """Re-run the noiseless forward model on the stored ground truth."""
    if ds.gt_frames is None:
        raise DataValidationError("dataset has no ground truth to replay")
    y = apply_forward_multi(ds.gt_frames.astype(np.complex128), ds.coils.astype(np.complex128),
                            ds.sampling)
    return y.astype(np.complex64)


def save_dataset(ds: KtDataset, path):
    H, W, T, C = ds.shape
    arrays = {"samples": ds.samples.astype(np.complex64), "coils": ds.coils.astype(np.complex64)}
    if isinstance(ds.sampling, CartesianMask):
        arrays["mask"] = ds.sampling.kept.astype(np.uint8)
    else:
        arrays["angles"] = ds.sampling.angles
        arrays["coords"] = ds.sampling.coords
        arrays["density"] = ds.sampling.density
    if ds.gt_frames is not None:
        arrays["gt_frames"] = ds.gt_frames.astype(np.complex64)
    if ds.gt_dvf is not None:
        arrays["gt_dvf"] = ds.gt_dvf.astype(np.float32)
    if ds.roi is not None:
        arrays["roi"] = ds.roi.astype(np.uint8)
    meta = {"kind": ds.kind, "H": H, "W": W, "T": T, "C": C,
            "noise_sigma": ds.noise_sigma, "provenance": ds.meta}
    container.write(path, DATASET_MAGIC, meta, arrays)


def load_dataset(path) -> KtDataset:
    meta, a = container.read(path, DATASET_MAGIC)
    if meta["kind"] == "cartesian":
        sampling = CartesianMask(a["mask"].astype(bool))
    elif meta["kind"] == "radial":
        sampling = RadialTrajectory(a["angles"], a["coords"], a["density"])
    else:
        raise DataValidationError(f"unknown sampling kind {meta['kind']!r}")
    coils = check_coils(a["coils"])
    return KtDataset(
        samples=a["samples"], sampling=sampling, coils=coils,
        noise_sigma=float(meta["noise_sigma"]),
        gt_frames=a.get("gt_frames"), gt_dvf=a.get("gt_dvf"),
        roi=a["roi"].astype(bool) if "roi" in a else None,
        meta=meta.get("provenance", {}),
    )
