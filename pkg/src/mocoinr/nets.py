"""Deformation network and canonical network, composed by coordinate warping.

Both networks encode coordinates with a hash grid, lay the per-pixel features
out as an ``(B, H, W, L*F)`` feature image in frame raster order, and decode it
with a small convolutional decoder. For the canonical network the features of
*warped* coordinates are laid out by the frame pixel they came from.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import container
from .errors import DataValidationError, ShapeError
from .hashenc import HashGrid, HashGridConfig, LevelWindow, full_window

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MCKP"


def _paper_dvf_grid(table_size=2**21):
    return HashGridConfig(levels=10, feats=4, dims=3, n_min=2, growth=2.0, table_size=table_size)


def _paper_canonical_grid(table_size=2**21):
    return HashGridConfig(levels=12, feats=8, dims=2, n_min=2, growth=2.0, table_size=table_size)


@dataclass(frozen=True)
class ModelConfig:
    dvf_grid: HashGridConfig = field(default_factory=_paper_dvf_grid)
    canonical_grid: HashGridConfig = field(default_factory=_paper_canonical_grid)
    hidden: int = 64
    kernel: int = 3
    margin: float = 0.125
    keep_frozen: bool = True

    @classmethod
    def paper(cls):
        return cls()

    @classmethod
    def desk(cls, log2_table=15):
        """Paper architecture with smaller hash tables for CPU-sized problems."""
        t = 2**log2_table
        return cls(dvf_grid=_paper_dvf_grid(t), canonical_grid=_paper_canonical_grid(t))

    def with_mlp_decoder(self):
        return replace(self, kernel=1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["dvf_grid"] = HashGridConfig(**d["dvf_grid"])
        d["canonical_grid"] = HashGridConfig(**d["canonical_grid"])
        return cls(**d)


class ConvDecoder:
    """conv(k) -> leaky -> conv(k) -> leaky -> conv(k); ``k=1`` is a per-pixel MLP."""

    def __init__(self, in_ch, out_ch, hidden=64, kernel=3, rng=None, zero_last=False,
                 dtype=np.float32, prefix="dec"):
        rng = np.random.default_rng() if rng is None else rng
        self.in_ch, self.out_ch, self.hidden, self.kernel = in_ch, out_ch, hidden, kernel
        chans = [in_ch, hidden, hidden, out_ch]
        self.weights = []
        self.biases = []
        for i in range(3):
            fan_in = kernel * kernel * chans[i]
            shape = (kernel, kernel, chans[i], chans[i + 1])
            if i == 2 and zero_last:
                w = np.zeros(shape)
            else:
                gain = 2.0 if i < 2 else 1.0
                w = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
            self.weights.append(ad.Tensor(w.astype(dtype), requires_grad=True, name=f"{prefix}.w{i + 1}"))
            self.biases.append(ad.Tensor(np.zeros(chans[i + 1], dtype=dtype), requires_grad=True,
                                         name=f"{prefix}.b{i + 1}"))

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self):
        return sum(p.size for p in self.params())

    def __call__(self, x):
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.conv2d(h, w, b)
            if i < 2:
                h = ad.leaky_relu(h, 0.01)
        return h


class _HashNet:
    def __init__(self, grid_config, out_ch, hidden, kernel, rng, zero_last, dtype, name):
        grid = HashGrid.init(grid_config, rng, dtype=dtype)
        self.config = grid_config
        self.tables = [ad.Tensor(t, requires_grad=True, name=f"{name}.level{l}")
                       for l, t in enumerate(grid.tables, start=1)]
        self.decoder = ConvDecoder(grid_config.out_dim, out_ch, hidden, kernel, rng,
                                   zero_last=zero_last, dtype=dtype, prefix=f"{name}.dec")
        if self.decoder.in_ch != grid_config.levels * grid_config.feats:
            raise ShapeError("decoder input width must equal L*F")

    def grid(self):
        return HashGrid(self.config, [t.data for t in self.tables])

    def set_trainable(self, window: LevelWindow):
        for l, t in enumerate(self.tables, start=1):
            t.requires_grad = window.trains(l)

    def params(self):
        return list(self.tables) + self.decoder.params()


class DvfNet(_HashNet):
    def __init__(self, grid_config, hidden=64, kernel=3, rng=None, dtype=np.float32):
        if grid_config.dims != 3:
            raise DataValidationError("the DVF grid encodes (x, y, t) and must be 3D")
        super().__init__(grid_config, 2, hidden, kernel, rng, True, dtype, "dvf")


class CanonicalNet(_HashNet):
    def __init__(self, grid_config, hidden=64, kernel=3, rng=None, dtype=np.float32):
        if grid_config.dims != 2:
            raise DataValidationError("the canonical grid must be 2D")
        super().__init__(grid_config, 2, hidden, kernel, rng, False, dtype, "canonical")


def frame_grid(H, W, dtype=np.float64):
    """Normalized pixel centers ``(H, W, 2)`` as ``(x, y)``."""
    y = (np.arange(H, dtype=dtype) + 0.5) / H
    x = (np.arange(W, dtype=dtype) + 0.5) / W
    Y, X = np.meshgrid(y, x, indexing="ij")
    return np.stack([X, Y], axis=-1)


def frame_time(t_idx, T):
    return (t_idx + 0.5) / T


@dataclass
class Windows:
    dvf: LevelWindow
    canonical: LevelWindow


class Model:
    """The DVF network, the canonical network and the sequence geometry."""

    def __init__(self, config: ModelConfig, shape, rng=None, dtype=np.float32, scale=1.0):
        rng = np.random.default_rng() if rng is None else rng
        self.config = config
        self.H, self.W, self.T = (int(s) for s in shape)
        self.dtype = np.dtype(dtype)
        self.scale = float(scale)
        self.dvf = DvfNet(config.dvf_grid, config.hidden, config.kernel, rng, dtype)
        self.canonical = CanonicalNet(config.canonical_grid, config.hidden, config.kernel, rng, dtype)

    def full_windows(self):
        return Windows(full_window(self.config.dvf_grid), full_window(self.config.canonical_grid))

    def params(self):
        return self.dvf.params() + self.canonical.params()

    def named_arrays(self):
        return {p.name: p.data for p in self.params()}

    def frame_coords(self):
        return frame_grid(self.H, self.W, self.dtype)


def dvf_forward(net: DvfNet, t_idx, H, W, T, window=None, keep_frozen=True, dtype=np.float32):
    """DVF ``(B, H, W, 2)`` for the frames in ``t_idx`` (normalized FOV units)."""
    t_idx = np.atleast_1d(np.asarray(t_idx))
    B = t_idx.size
    p = frame_grid(H, W, dtype)
    coords = np.empty((B, H, W, 3), dtype=dtype)
    coords[..., :2] = p[None]
    coords[..., 2] = frame_time(t_idx, T).astype(dtype)[:, None, None]
    window = window or full_window(net.config)
    feats = ad.hash_encode(net.tables, coords.reshape(-1, 3), net.config, window, keep_frozen)
    feats = ad.reshape(feats, (B, H, W, net.config.out_dim))
    return net.decoder(feats)


def warp_coords(p, u, margin=0.125):
    """``p + u`` clamped to the canonical domain ``[-margin, 1 + margin]``.

    Returns the warped coordinate tensor and the number of clamped components.
    """
    p = np.asarray(p)
    u = ad.as_tensor(u)
    if p.shape != u.shape:
        raise ShapeError(f"coordinates {p.shape} and displacement {u.shape} differ")
    raw = ad.add(ad.Tensor(p.astype(u.dtype, copy=False)), u)
    lo, hi = -margin, 1.0 + margin
    n_sat = int(np.count_nonzero((raw.data < lo) | (raw.data > hi)))
    if n_sat:
        log.debug("clamped %d warped coordinate components", n_sat)
    return ad.clamp(raw, lo, hi), n_sat


def canonical_forward(net: CanonicalNet, warped, window=None, margin=0.125, keep_frozen=True):
    """Canonical readout ``(B, H, W, 2)`` (real, imag) at warped coordinates."""
    warped = ad.as_tensor(warped)
    if warped.data.ndim != 4 or warped.shape[-1] != 2:
        raise ShapeError("warped coordinates must be (B, H, W, 2)")
    B, H, W, _ = warped.shape
    c = ad.scalar_mul(ad.add_scalar(warped, margin), 1.0 / (1.0 + 2.0 * margin))
    window = window or full_window(net.config)
    feats = ad.hash_encode(net.tables, ad.reshape(c, (-1, 2)), net.config, window, keep_frozen)
    feats = ad.reshape(feats, (B, H, W, net.config.out_dim))
    return net.decoder(feats)


def predict_frames(model: Model, t_idx, windows: Windows | None = None, zero_dvf=False):
    """Run DVF -> warp -> canonical for a batch of frames.

    Returns ``(image_pair, dvf, n_saturated)`` with the image as a
    ``(B, H, W, 2)`` real/imag tensor in model (scaled) units.
    """
    windows = windows or model.full_windows()
    t_idx = np.atleast_1d(np.asarray(t_idx))
    if np.any(t_idx < 0) or np.any(t_idx >= model.T):
        raise DataValidationError(f"frame index out of range 0..{model.T - 1}")
    kf = model.config.keep_frozen
    u = dvf_forward(model.dvf, t_idx, model.H, model.W, model.T, windows.dvf, kf, model.dtype)
    if zero_dvf:
        u = ad.Tensor(np.zeros(u.shape, dtype=u.dtype))
    p = np.broadcast_to(model.frame_coords(), u.shape)
    warped, n_sat = warp_coords(p, u, model.config.margin)
    img = canonical_forward(model.canonical, warped, windows.canonical, model.config.margin, kf)
    return img, u, n_sat


def predict_frame(model: Model, t_idx, windows: Windows | None = None):
    """Complex frame ``(H, W)`` in data units."""
    img, _, _ = predict_frames(model, [t_idx], windows)
    return ad.to_complex(img.data[0].astype(np.float64)) / model.scale


def canonical_image(model: Model, windows: Windows | None = None):
    """Canonical network read out at identity (unwarped) coordinates."""
    windows = windows or model.full_windows()
    p = model.frame_coords()[None]
    img = canonical_forward(model.canonical, ad.Tensor(p), windows.canonical, model.config.margin,
                            model.config.keep_frozen)
    return ad.to_complex(img.data[0].astype(np.float64)) / model.scale


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path, iteration=0, seed=0, extra=None):
    meta = {
        "kind": "mocoinr-checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "shape": [model.H, model.W, model.T],
        "dtype": model.dtype.str,
        "scale": model.scale,
        "iteration": int(iteration),
        "seed": int(seed),
        "extra": extra or {},
    }
    container.write(path, CHECKPOINT_MAGIC, meta, model.named_arrays())


def load_checkpoint(path):
    meta, arrays = container.read(path, CHECKPOINT_MAGIC)
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise DataValidationError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = Model(cfg, meta["shape"], rng=np.random.default_rng(0), dtype=np.dtype(meta["dtype"]),
                  scale=meta["scale"])
    for p in model.params():
        if p.name not in arrays or arrays[p.name].shape != p.shape:
            raise ShapeError(f"checkpoint is missing or mis-shapes {p.name}")
        p.data = arrays[p.name]
    return model, meta
