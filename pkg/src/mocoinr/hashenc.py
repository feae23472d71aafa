"""Multiresolution hash-grid encoding (2D/3D) with a coarse-to-fine level window.

Levels are 1-based throughout. Level ``l`` has ``N_l = floor(n_min * b**(l-1))``
cells per axis and ``N_l + 1`` vertices. A level whose ``(N_l + 1)**dims``
vertices fit in the table is indexed densely; otherwise corners are hashed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import DataValidationError, ShapeError

PRIMES = (1, 2654435761, 805459861)
INIT_RANGE = 1e-4


@dataclass(frozen=True)
class HashGridConfig:
    levels: int
    feats: int
    dims: int = 2
    n_min: int = 2
    growth: float = 2.0
    table_size: int = 2**21

    def __post_init__(self):
        if self.n_min < 1:
            raise DataValidationError("n_min must be >= 1")
        if self.growth <= 1:
            raise DataValidationError("growth must be > 1")
        if self.levels < 1 or self.feats < 1:
            raise DataValidationError("levels and feats must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise DataValidationError("table_size must be a power of two")
        if self.dims not in (2, 3):
            raise DataValidationError("dims must be 2 or 3")

    @property
    def out_dim(self):
        return self.levels * self.feats


@dataclass(frozen=True)
class LevelWindow:
    lo: int
    hi: int

    def __post_init__(self):
        if not (1 <= self.lo <= self.hi):
            raise DataValidationError(f"invalid level window ({self.lo}, {self.hi})")

    def check(self, levels):
        if self.hi > levels:
            raise DataValidationError(f"window ({self.lo}, {self.hi}) exceeds {levels} levels")
        return self

    def trains(self, level):
        return self.lo <= level <= self.hi


def full_window(config):
    return LevelWindow(1, config.levels)


def level_resolution(config, level):
    if not (1 <= level <= config.levels):
        raise DataValidationError(f"level {level} outside 1..{config.levels}")
    return int(math.floor(config.n_min * config.growth ** (level - 1)))


def level_is_dense(config, level):
    return (level_resolution(config, level) + 1) ** config.dims <= config.table_size


def level_entries(config, level):
    n = level_resolution(config, level) + 1
    return n**config.dims if n**config.dims <= config.table_size else config.table_size


class HashGrid:
    """Feature tables, one ``(entries_l, F)`` array per level."""

    def __init__(self, config: HashGridConfig, tables):
        self.config = config
        if len(tables) != config.levels:
            raise ShapeError("one table per level required")
        for l, t in enumerate(tables, start=1):
            if t.shape != (level_entries(config, l), config.feats):
                raise ShapeError(f"level {l} table has shape {t.shape}")
        self.tables = list(tables)

    @classmethod
    def init(cls, config, rng, dtype=np.float32):
        tables = [
            rng.uniform(-INIT_RANGE, INIT_RANGE, size=(level_entries(config, l), config.feats)).astype(dtype)
            for l in range(1, config.levels + 1)
        ]
        return cls(config, tables)

    def n_params(self):
        return sum(t.size for t in self.tables)


def _check_coords(config, coords, tol=1e-6):
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != config.dims:
        raise ShapeError(f"coords must be (N, {config.dims})")
    if not np.all(np.isfinite(coords)):
        raise DataValidationError("non-finite coordinates")
    if coords.min(initial=0.0) < -tol or coords.max(initial=0.0) > 1 + tol:
        raise DataValidationError("coordinates outside the encoding domain [0, 1]")
    return np.clip(coords, 0.0, 1.0)


class LevelLookup:
    """Corner indices, interpolation weights and their coordinate derivatives
    for one level and a batch of points."""

    __slots__ = ("idx", "w", "dw")

    def __init__(self, idx, w, dw):
        self.idx = idx  # (N, 2**d) int64
        self.w = w  # (N, 2**d)
        self.dw = dw  # (N, 2**d, d)


def corner_lookup(config, level, coords):
    d = config.dims
    res = level_resolution(config, level)
    pos = coords * res
    cell = np.clip(np.floor(pos), 0, res - 1).astype(np.int64)
    frac = pos - cell
    one_m = 1.0 - frac
    dense = level_is_dense(config, level)
    n_pts = coords.shape[0]
    idx = np.empty((n_pts, 2**d), dtype=np.int64)
    w = np.empty((n_pts, 2**d), dtype=coords.dtype)
    dw = np.empty((n_pts, 2**d, d), dtype=coords.dtype)
    for c, bits in enumerate(product((0, 1), repeat=d)):
        corner = cell + np.asarray(bits, dtype=np.int64)
        factors = [frac[:, k] if b else one_m[:, k] for k, b in enumerate(bits)]
        w[:, c] = np.prod(factors, axis=0)
        for k, b in enumerate(bits):
            others = [factors[j] for j in range(d) if j != k]
            dfac = res if b else -res
            dw[:, c, k] = dfac * (np.prod(others, axis=0) if others else 1.0)
        if dense:
            stride = 1
            flat = np.zeros(n_pts, dtype=np.int64)
            for k in range(d):
                flat += corner[:, k] * stride
                stride *= res + 1
            idx[:, c] = flat
        else:
            h = np.zeros(n_pts, dtype=np.uint64)
            for k in range(d):
                h ^= corner[:, k].astype(np.uint64) * np.uint64(PRIMES[k])
            idx[:, c] = (h & np.uint64(config.table_size - 1)).astype(np.int64)
    return LevelLookup(idx, w, dw)


def _forward_levels(config, window, keep_frozen):
    """Levels whose features reach the output."""
    lo = 1 if keep_frozen else window.lo
    return range(lo, window.hi + 1)


def encode(grid: HashGrid, coords, window: LevelWindow | None = None, keep_frozen=True,
           return_lookups=False):
    """Features ``(N, L*F)``, level-major.

    Levels above ``window.hi`` output zeros. Levels below ``window.lo`` are
    frozen: they still contribute (``keep_frozen=True``) but receive no
    gradient in :func:`encode_backward`.
    """
    cfg = grid.config
    window = (window or full_window(cfg)).check(cfg.levels)
    coords = _check_coords(cfg, coords)
    F = cfg.feats
    dtype = np.result_type(grid.tables[0].dtype, coords.dtype)
    out = np.zeros((coords.shape[0], cfg.levels * F), dtype=dtype)
    lookups = {}
    for l in _forward_levels(cfg, window, keep_frozen):
        lk = corner_lookup(cfg, l, coords)
        lookups[l] = lk
        table = grid.tables[l - 1]
        out[:, (l - 1) * F:l * F] = np.einsum("nc,ncf->nf", lk.w, table[lk.idx])
    if return_lookups:
        return out, lookups
    return out


def encode_backward(grid: HashGrid, coords, window: LevelWindow | None, upstream,
                    lookups=None, keep_frozen=True, want_coords=False):
    """Reverse pass of :func:`encode`.

    Returns per-level table gradients (zero outside ``[lo, hi]``) and, when
    ``want_coords`` is set, the gradient w.r.t. the coordinates, which flows
    through every level that contributed to the forward output.
    """
    cfg = grid.config
    window = (window or full_window(cfg)).check(cfg.levels)
    coords = _check_coords(cfg, coords)
    upstream = np.asarray(upstream)
    if upstream.shape != (coords.shape[0], cfg.out_dim):
        raise ShapeError(f"upstream gradient {upstream.shape} expected {(coords.shape[0], cfg.out_dim)}")
    F = cfg.feats
    grads = [np.zeros_like(t) for t in grid.tables]
    g_coords = np.zeros(coords.shape, dtype=np.result_type(coords.dtype, upstream.dtype)) if want_coords else None
    for l in _forward_levels(cfg, window, keep_frozen):
        lk = lookups[l] if lookups is not None and l in lookups else corner_lookup(cfg, l, coords)
        up = upstream[:, (l - 1) * F:l * F]
        if window.trains(l):
            grads[l - 1] = scatter_rows(lk.idx, lk.w, up, grads[l - 1].shape[0]).astype(grads[l - 1].dtype)
        if want_coords:
            table = grid.tables[l - 1]
            # (N, corners): dot of each corner feature with the upstream gradient
            proj = np.einsum("ncf,nf->nc", table[lk.idx], up)
            g_coords += np.einsum("nc,nck->nk", proj, lk.dw)
    if want_coords:
        return grads, g_coords
    return grads


def scatter_rows(idx, w, up, n_rows):
    """``out[idx[n, c]] += w[n, c] * up[n]`` with deterministic accumulation."""
    flat = idx.reshape(-1)
    F = up.shape[1]
    out = np.empty((n_rows, F), dtype=np.float64)
    contrib = w[:, :, None] * up[:, None, :]
    contrib = contrib.reshape(-1, F)
    for f in range(F):
        out[:, f] = np.bincount(flat, weights=contrib[:, f], minlength=n_rows)
    return out


DVF_STAGES = ((1, 6), (4, 8), (6, 10))
CANONICAL_STAGES = ((1, 8), (6, 10), (8, 12))


def schedule_window(net, iteration, total_iters=1200):
    """Active level window for ``net`` ("dvf" or "canonical") at a 1-based iteration.

    Stages split the budget into thirds; a boundary iteration belongs to the
    earlier stage (1..400, 401..800, 801..1200 for the default budget).
    """
    stages = {"dvf": DVF_STAGES, "canonical": CANONICAL_STAGES}.get(net)
    if stages is None:
        raise ValueError(f"unknown network {net!r}")
    if iteration < 1:
        raise DataValidationError("iterations are 1-based")
    if iteration * 3 <= total_iters:
        stage = 0
    elif iteration * 3 <= 2 * total_iters:
        stage = 1
    else:
        stage = 2
    return LevelWindow(*stages[stage])
