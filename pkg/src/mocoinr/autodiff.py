"""Small reverse-mode differentiation engine over real numpy arrays.

A :class:`Tape` records primitive applications in execution order while it is
active; :meth:`Tape.backward` walks the record in reverse and accumulates
gradients into every leaf that requires them. Outside a tape the primitives
just compute values.

Complex quantities are carried as real arrays with a trailing axis of size 2
(real, imaginary). For a complex linear operator ``A`` acting on such a pair
the reverse pass is ``A^H`` applied to the upstream pair.
"""
from __future__ import annotations

import numpy as np

from . import hashenc
from .errors import DataValidationError, ShapeError
from .kspace import fft2c, ifft2c

CHECK_FINITE = True
_ACTIVE = []


class NonFiniteError(DataValidationError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def numpy(self):
        return self.data


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "fn", "name")

    def __init__(self, out, inputs, fn, name):
        self.out = out
        self.inputs = inputs
        self.fn = fn
        self.name = name


class Tape:
    """Execution-ordered record of primitives; use as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def release(self):
        """Drop recorded nodes so the graph's buffers can be freed immediately."""
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []

    def backward(self, loss, params=None):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            in_grads = node.fn(g, needs)
            for inp, need, gi in zip(node.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node.name}: gradient shape {gi.shape} != input {inp.shape}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    if inp._tape is None:
                        leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        if params is None:
            return [leaf.grad for leaf in leaves.values()]
        out = []
        for p in params:
            g = grads.get(id(p))
            if g is None or id(p) not in leaves:
                g = np.zeros_like(p.data)
            p.grad = g
            out.append(g)
        return out


def backward(loss, params=None):
    """Gradients of scalar ``loss`` w.r.t. ``params`` (or every reached leaf)."""
    tape = loss._tape
    if tape is None:
        if loss.data.size != 1:
            raise ShapeError("backward needs a scalar loss")
        params = params or []
        for p in params:
            p.grad = np.zeros_like(p.data)
        return [p.grad for p in params]
    return tape.backward(loss, params)


def _emit(name, data, inputs, fn):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"primitive {name!r} produced non-finite values")
    out = Tensor(data)
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(inputs), fn, name))
    return out


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g, n: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g, n: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g, n: (g * bd if n[0] else None, g * ad if n[1] else None))


def scalar_mul(a, c):
    a = as_tensor(a)
    c = float(c)
    return _emit("scalar_mul", a.data * a.data.dtype.type(c), (a,), lambda g, n: (g * g.dtype.type(c),))


def add_scalar(a, c):
    a = as_tensor(a)
    return _emit("add_scalar", a.data + a.data.dtype.type(c), (a,), lambda g, n: (g,))


def leaky_relu(a, slope=0.01):
    a = as_tensor(a)
    pos = a.data > 0
    s = a.data.dtype.type(slope)
    return _emit("leaky_relu", np.where(pos, a.data, a.data * s), (a,),
                 lambda g, n: (np.where(pos, g, g * s),))


def abs_smooth(a, eps=1e-6):
    """Charbonnier ``sqrt(x^2 + eps^2)``."""
    a = as_tensor(a)
    r = np.sqrt(a.data * a.data + a.data.dtype.type(eps * eps))
    return _emit("abs_smooth", r, (a,), lambda g, n: (g * a.data / r,))


def cabs_smooth(z, eps=1e-6):
    """Smoothed complex modulus of a ``(..., 2)`` pair -> ``(...)``."""
    z = as_tensor(z)
    if z.shape[-1] != 2:
        raise ShapeError("cabs_smooth expects a trailing (real, imag) axis")
    d = z.data
    r = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2 + d.dtype.type(eps * eps))
    return _emit("cabs_smooth", r, (z,), lambda g, n: ((g / r)[..., None] * d,))


def clamp(a, lo, hi):
    """Clip to ``[lo, hi]``; clipped entries pass no gradient."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clamp", np.clip(a.data, lo, hi), (a,), lambda g, n: (np.where(inside, g, 0),))


# -- reductions and reshaping ------------------------------------------------


def sum(a):  # noqa: A001 - mirrors numpy naming on purpose
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    return _emit("sum", np.asarray(a.data.sum(dtype=dtype)), (a,),
                 lambda g, n: (np.full(shape, g, dtype=dtype),))


def mean(a):
    a = as_tensor(a)
    return scalar_mul(sum(a), 1.0 / a.size)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g, n: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g, n: tuple(np.split(g, cuts, axis=axis)))


def diff(a, axis):
    """Forward difference ``a[i+1] - a[i]`` along ``axis`` (length shrinks by one)."""
    a = as_tensor(a)
    shape = a.shape
    ax = axis % a.data.ndim

    def bwd(g, n):
        out = np.zeros(shape, dtype=g.dtype)
        hi = [slice(None)] * len(shape)
        lo = [slice(None)] * len(shape)
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        out[tuple(hi)] += g
        out[tuple(lo)] -= g
        return (out,)

    return _emit("diff", np.diff(a.data, axis=ax), (a,), bwd)


def finite_diff_x(a):
    """Forward difference along W for channels-last ``(..., H, W, C)`` tensors."""
    return diff(a, -2)


def finite_diff_y(a):
    """Forward difference along H for channels-last ``(..., H, W, C)`` tensors."""
    return diff(a, -3)


def laplacian2d(a):
    """5-point Laplacian on the interior of ``(..., H, W, C)``; output ``(..., H-2, W-2, C)``."""
    a = as_tensor(a)
    d = a.data
    c = d[..., 1:-1, 1:-1, :]
    lap = d[..., :-2, 1:-1, :] + d[..., 2:, 1:-1, :] + d[..., 1:-1, :-2, :] + d[..., 1:-1, 2:, :] - 4 * c
    shape = a.shape

    def bwd(g, n):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., :-2, 1:-1, :] += g
        out[..., 2:, 1:-1, :] += g
        out[..., 1:-1, :-2, :] += g
        out[..., 1:-1, 2:, :] += g
        out[..., 1:-1, 1:-1, :] -= 4 * g
        return (out,)

    return _emit("laplacian2d", lap, (a,), bwd)


# -- convolution -------------------------------------------------------------


def _im2col(xp, k, H, W):
    return np.concatenate(
        [xp[:, dy:dy + H, dx:dx + W, :] for dy in range(k) for dx in range(k)], axis=-1
    )


def conv2d(x, w, b):
    """Stride-1, zero-padded ("same") 2D convolution, channels-last.

    ``x``: ``(B, H, W, Cin)``, ``w``: ``(k, k, Cin, Cout)`` with odd ``k``,
    ``b``: ``(Cout,)``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x (B,H,W,C) and w (k,k,Cin,Cout)")
    k = w.shape[0]
    if w.shape[1] != k or k % 2 == 0:
        raise ShapeError("conv2d kernel must be square with odd size")
    B, H, W, Ci = x.shape
    if w.shape[2] != Ci:
        raise ShapeError(f"conv2d: input has {Ci} channels, kernel expects {w.shape[2]}")
    Co = w.shape[3]
    if b.shape != (Co,):
        raise ShapeError("conv2d bias must be (Cout,)")
    p = k // 2
    if p:
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = _im2col(xp, k, H, W).reshape(B * H * W, k * k * Ci)
    else:
        cols = x.data.reshape(B * H * W, Ci)
    w2 = w.data.reshape(k * k * Ci, Co)
    out = (cols @ w2 + b.data).reshape(B, H, W, Co)

    def bwd(g, n):
        g2 = g.reshape(B * H * W, Co)
        gx = gw = gb = None
        if n[1]:
            gw = (cols.T @ g2).reshape(w.shape)
        if n[2]:
            gb = g2.sum(axis=0)
        if n[0]:
            gcols = g2 @ w2.T
            if p:
                gcols = gcols.reshape(B, H, W, k * k * Ci)
                gxp = np.zeros((B, H + 2 * p, W + 2 * p, Ci), dtype=g.dtype)
                for j, (dy, dx) in enumerate((dy, dx) for dy in range(k) for dx in range(k)):
                    gxp[:, dy:dy + H, dx:dx + W, :] += gcols[..., j * Ci:(j + 1) * Ci]
                gx = gxp[:, p:p + H, p:p + W, :]
            else:
                gx = gcols.reshape(B, H, W, Ci)
        return gx, gw, gb

    return _emit("conv2d", out, (x, w, b), bwd)


# -- sampling / lookup -------------------------------------------------------


def bilinear_sample(src, coords):
    """Sample ``src`` ``(H, W, C)`` at continuous pixel positions ``coords``
    ``(N, 2)`` given as ``(x, y)``; positions are clamped to the image."""
    src, coords = as_tensor(src), as_tensor(coords)
    H, W, C = src.shape
    xy = coords.data
    x = np.clip(xy[:, 0], 0, W - 1)
    y = np.clip(xy[:, 1], 0, H - 1)
    inside_x = (xy[:, 0] >= 0) & (xy[:, 0] <= W - 1)
    inside_y = (xy[:, 1] >= 0) & (xy[:, 1] <= H - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(H - 2, 0))
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    s = src.data
    v00, v01 = s[y0, x0], s[y0, x0 + 1]
    v10, v11 = s[y0 + 1, x0], s[y0 + 1, x0 + 1]
    out = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)

    def bwd(g, n):
        gs = gc = None
        if n[0]:
            gs = np.zeros(src.shape, dtype=g.dtype)
            np.add.at(gs, (y0, x0), (1 - fy) * (1 - fx) * g)
            np.add.at(gs, (y0, x0 + 1), (1 - fy) * fx * g)
            np.add.at(gs, (y0 + 1, x0), fy * (1 - fx) * g)
            np.add.at(gs, (y0 + 1, x0 + 1), fy * fx * g)
        if n[1]:
            dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            gc = np.stack([(dx * g).sum(-1) * inside_x, (dy * g).sum(-1) * inside_y], axis=-1)
        return gs, gc

    return _emit("bilinear_sample", out, (src, coords), bwd)


def gather_rows(table, idx):
    """``table[idx]`` with scatter-add in the reverse pass."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    n_rows = table.shape[0]

    def bwd(g, n):
        flat = g.reshape(idx.size, -1)
        out = np.stack(
            [np.bincount(idx.reshape(-1), weights=flat[:, f], minlength=n_rows) for f in range(flat.shape[1])],
            axis=-1,
        )
        return (out.reshape(table.shape).astype(g.dtype),)

    return _emit("gather_rows", table.data[idx], (table,), bwd)


def hash_encode(tables, coords, config, window=None, keep_frozen=True):
    """Fused multiresolution hash encoding of ``coords`` ``(N, dims)``.

    Gradients flow to the tables of levels inside ``window`` and to the
    coordinates through every level that contributes to the output.
    """
    tables = [as_tensor(t) for t in tables]
    coords = as_tensor(coords)
    window = window or hashenc.full_window(config)
    grid = hashenc.HashGrid(config, [t.data for t in tables])
    feats, lookups = hashenc.encode(grid, coords.data, window, keep_frozen=keep_frozen, return_lookups=True)

    def bwd(g, n):
        want_coords = n[0]
        res = hashenc.encode_backward(grid, coords.data, window, g, lookups=lookups,
                                      keep_frozen=keep_frozen, want_coords=want_coords)
        if want_coords:
            table_grads, g_coords = res
        else:
            table_grads, g_coords = res, None
        return (g_coords.astype(coords.dtype) if g_coords is not None else None,
                *[tg if need else None for tg, need in zip(table_grads, n[1:])])

    return _emit("hash_encode", feats.astype(tables[0].dtype, copy=False), (coords, *tables), bwd)


# -- complex linear maps -----------------------------------------------------


def to_complex(pair):
    return pair[..., 0] + 1j * pair[..., 1]


def to_pair(z, dtype):
    return np.stack([z.real, z.imag], axis=-1).astype(dtype, copy=False)


def complex_linear(z, forward, adjoint, name="complex_linear"):
    """Apply complex-linear ``forward`` to a ``(..., 2)`` pair.

    ``adjoint`` must be the exact adjoint of ``forward``; it maps the upstream
    gradient pair back to the input pair.
    """
    z = as_tensor(z)
    if z.shape[-1] != 2:
        raise ShapeError(f"{name} expects a trailing (real, imag) axis")
    dtype = z.dtype
    out = to_pair(forward(to_complex(z.data)), dtype)
    in_shape = z.shape

    def bwd(g, n):
        gi = to_pair(adjoint(to_complex(g)), dtype)
        if gi.shape != in_shape:
            raise ShapeError(f"{name}: adjoint returned {gi.shape}, expected {in_shape}")
        return (gi,)

    return _emit(name, out, (z,), bwd)


def complex_fft_pair(z):
    """Centered orthonormal FFT over axes ``(-3, -2)`` of a ``(..., H, W, 2)`` pair."""
    return complex_linear(z, fft2c, ifft2c, name="complex_fft_pair")


# -- verification --------------------------------------------------------------


def gradcheck(f, inputs, eps=1e-6, max_checks=None, seed=0):
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The error of each coordinate is ``|analytic - numeric|`` divided by the
    largest gradient magnitude of the same input. ``max_checks`` limits the
    number of coordinates probed per input (seeded random subset, always
    including the largest analytic entry). Returns
    ``(worst_error, (input_index, flat_index))``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    inputs = [as_tensor(t) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.data = np.ascontiguousarray(t.data)
    with Tape():
        loss = f(*inputs)
    analytic = backward(loss, inputs)
    worst, where = 0.0, None
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        a = analytic[i].reshape(-1)
        if max_checks is not None and flat.size > max_checks:
            picks = rng.choice(flat.size, size=max_checks - 1, replace=False)
            picks = np.unique(np.append(picks, np.argmax(np.abs(a))))
        else:
            picks = np.arange(flat.size)
        numeric = np.zeros(picks.size)
        for n, j in enumerate(picks):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f(*inputs).data)
            flat[j] = orig - eps
            fm = float(f(*inputs).data)
            flat[j] = orig
            numeric[n] = (fp - fm) / (2 * eps)
        a = a[picks]
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(a).max(initial=0.0), 1e-12)
        err = np.abs(a - numeric) / scale
        n = int(np.argmax(err)) if err.size else 0
        if err.size and err[n] > worst:
            worst, where = float(err[n]), (i, int(picks[n]))
    return worst, where
