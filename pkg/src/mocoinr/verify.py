"""Double-precision oracle suites behind ``mocoinr verify``.

Each check returns a :class:`Check` with its worst observed error and the
tolerance it is held to. Oracles here are written independently of the code
under test (direct DFT/NDFT sums, central differences, hand-indexed hash
slots).
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import autodiff as ad
from .hashenc import (
    PRIMES, HashGrid, HashGridConfig, LevelWindow, encode, encode_backward, level_entries,
    level_resolution,
)
from .kspace import (
    NufftPlan, RadialAcquisition, apply_adjoint_cartesian, apply_forward_cartesian, fft2c,
)
from .nets import Model, ModelConfig
from .phantom import PhantomSpec, make_coils, make_phantom
from .sampling import make_golden_angle_traj
from .trainer import TrainConfig, _BatchOperator, build_loss

SUITES = ("adjoint", "gradcheck", "interp")


@dataclass
class Check:
    suite: str
    name: str
    error: float
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _cplx(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _unit_coils(rng, C, H, W):
    s = _cplx(rng, C, H, W)
    return s / np.sqrt(np.sum(np.abs(s) ** 2, axis=0))


def ndft(x, coords):
    """Direct non-uniform DFT; pixel ``(i, j)`` sits at ``(j - W//2, i - H//2)``."""
    H, W = x.shape
    ys = np.arange(H) - H // 2
    xs = np.arange(W) - W // 2
    out = np.empty(coords.shape[0], dtype=complex)
    for m, (kx, ky) in enumerate(coords):
        out[m] = np.sum(x * np.exp(-2j * np.pi * (ky * ys[:, None] + kx * xs[None, :])))
    return out


def _dot_error(Ax, y, x, AHy):
    return abs(np.vdot(Ax, y) - np.vdot(x, AHy)) / (np.linalg.norm(Ax) * np.linalg.norm(y))


# -- adjoint suite -----------------------------------------------------------


def adjoint_suite(seed=0):
    rng = np.random.default_rng(seed)
    checks = []
    worst = 0.0
    for H, W, C in ((8, 8, 1), (16, 12, 3), (7, 9, 2)):
        coils = _unit_coils(rng, C, H, W)
        mask = rng.random(H) < 0.5
        mask[H // 2] = True
        x = _cplx(rng, H, W)
        y = _cplx(rng, C, int(mask.sum()), W)
        worst = max(worst, _dot_error(apply_forward_cartesian(x, coils, mask), y, x,
                                      apply_adjoint_cartesian(y, coils, mask)))
    checks.append(Check("adjoint", "cartesian dot test", worst, 1e-10))

    worst = 0.0
    for H, W in ((16, 16), (12, 20), (32, 32)):
        plan = NufftPlan(rng.uniform(-0.5, 0.5, (80, 2)), (H, W))
        x = _cplx(rng, H, W)
        y = _cplx(rng, 80)
        worst = max(worst, _dot_error(plan.forward(x), y, x, plan.adjoint(y)))
    checks.append(Check("adjoint", "nufft dot test", worst, 1e-6))

    H = W = 16
    coils = make_coils(H, W, 3, seed=seed)
    traj = make_golden_angle_traj(8, 32, 2, shape=(H, W))
    acq = RadialAcquisition(traj, coils)
    x = _cplx(rng, H, W)
    y = _cplx(rng, *acq.sample_shape(1))
    checks.append(Check("adjoint", "radial multi-coil dot test",
                        _dot_error(acq.forward(x, 1), y, x, acq.adjoint(y, 1)), 1e-6))

    coords = make_golden_angle_traj(8, 32, 1, shape=(16, 16)).frame_coords(0)
    x = _cplx(rng, 16, 16)
    ref = ndft(x, coords)
    err = np.linalg.norm(NufftPlan(coords, (16, 16), norm=None).forward(x) - ref) / np.linalg.norm(ref)
    checks.append(Check("adjoint", "nufft vs ndft 16x16 / 8 spokes", err, 1e-3))

    worst = 0.0
    for H, W in ((4, 4), (8, 8), (5, 11), (32, 32)):
        c = rng.uniform(-0.5, 0.5, (64, 2))
        x = _cplx(rng, H, W)
        ref = ndft(x, c)
        got = NufftPlan(c, (H, W), norm=None).forward(x)
        worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    checks.append(Check("adjoint", "nufft vs ndft, grids <= 32x32", worst, 1e-3))

    # direct O(N^2) DFT for the Cartesian transform
    x = _cplx(rng, 8, 8)
    idx = np.arange(8) - 4
    Fm = np.exp(-2j * np.pi * np.outer(idx, idx) / 8) / np.sqrt(8)
    ref = Fm @ x @ Fm.T
    checks.append(Check("adjoint", "fft2c vs direct dft", np.linalg.norm(fft2c(x) - ref) / np.linalg.norm(ref), 1e-10))
    return checks


# -- gradient suite ----------------------------------------------------------


def _primitive_cases(rng):
    probes = {}

    def probe(shape):
        if shape not in probes:
            probes[shape] = rng.standard_normal(shape)
        return ad.Tensor(probes[shape])

    def dot(t):
        return ad.sum(ad.mul(t, probe(t.shape)))

    n = rng.standard_normal
    M = _cplx(rng, 3, 4)
    hcfg = HashGridConfig(levels=3, feats=2, dims=3, table_size=64)
    tabs = [n((level_entries(hcfg, l), 2)) for l in range(1, 4)]
    hx = (np.floor(rng.random((5, 3)) * 8) + rng.uniform(0.2, 0.8, (5, 3))) / 8
    return {
        "add": (lambda a, b: dot(ad.add(a, b)), [n((3, 4)), n((3, 4))]),
        "sub": (lambda a, b: dot(ad.sub(a, b)), [n((3, 4)), n((3, 4))]),
        "mul": (lambda a, b: dot(ad.mul(a, b)), [n((3, 4)), n((3, 4))]),
        "scalar_mul": (lambda a: dot(ad.scalar_mul(a, 1.7)), [n(5)]),
        "add_scalar": (lambda a: ad.sum(ad.mul(ad.add_scalar(a, 0.2), ad.add_scalar(a, 0.2))), [n(5)]),
        "leaky_relu": (lambda a: dot(ad.leaky_relu(a)), [np.sign(n(9)) * rng.uniform(0.1, 1, 9)]),
        "abs_smooth": (lambda a: dot(ad.abs_smooth(a, 1e-3)), [n(6)]),
        "cabs_smooth": (lambda z: dot(ad.cabs_smooth(z, 1e-3)), [n((4, 2))]),
        "clamp": (lambda a: dot(ad.clamp(a, -0.5, 0.5)), [np.r_[rng.uniform(-0.4, 0.4, 4), rng.uniform(0.6, 2, 4)]]),
        "sum": (lambda a: ad.mul(ad.sum(a), ad.sum(a)), [n((2, 3))]),
        "mean": (lambda a: ad.mul(ad.mean(a), ad.mean(a)), [n((2, 3))]),
        "reshape": (lambda a: dot(ad.reshape(a, (2, 6))), [n((3, 4))]),
        "concat": (lambda a, b: dot(ad.concat([a, b], axis=0)), [n((2, 3)), n((1, 3))]),
        "diff": (lambda a: dot(ad.diff(a, 1)), [n((3, 4))]),
        "finite_diff_x": (lambda a: dot(ad.finite_diff_x(a)), [n((1, 4, 5, 2))]),
        "finite_diff_y": (lambda a: dot(ad.finite_diff_y(a)), [n((1, 4, 5, 2))]),
        "laplacian2d": (lambda a: dot(ad.laplacian2d(a)), [n((2, 5, 5, 2))]),
        "conv2d": (lambda x, w, b: dot(ad.conv2d(x, w, b)), [n((2, 4, 5, 2)), n((3, 3, 2, 3)), n(3)]),
        "bilinear_sample": (lambda s, c: dot(ad.bilinear_sample(s, c)),
                            [n((4, 5, 2)), rng.integers(0, 3, (5, 2)) + rng.uniform(0.2, 0.8, (5, 2))]),
        "gather_rows": (lambda t: dot(ad.gather_rows(t, np.array([1, 1, 3, 0]))), [n((5, 2))]),
        "hash_encode": (lambda c, *ts: dot(ad.hash_encode(list(ts), c, hcfg, LevelWindow(1, 3))), [hx, *tabs]),
        "complex_linear": (lambda z: dot(ad.complex_linear(z, lambda v: v @ M.T, lambda v: v @ M.conj())),
                           [n((2, 4, 2))]),
        "complex_fft_pair": (lambda z: dot(ad.complex_fft_pair(z)), [n((1, 4, 6, 2))]),
    }


def toy_problem(seed=0, kind="radial"):
    """8x8, T=2 double-precision model, operator and data for the end-to-end check."""
    rng = np.random.default_rng(seed)
    H = W = 8
    T = 2
    cfg = ModelConfig(
        dvf_grid=HashGridConfig(levels=10, feats=4, dims=3, table_size=2**6),
        canonical_grid=HashGridConfig(levels=12, feats=8, dims=2, table_size=2**6),
        hidden=8,
    )
    model = Model(cfg, (H, W, T), rng=rng, dtype=np.float64)
    for p in model.params():
        p.data = p.data.astype(np.float64)
    for t in model.dvf.tables + model.canonical.tables:
        t.data = 0.5 * rng.standard_normal(t.shape)
    last = model.dvf.decoder.weights[-1]
    last.data = 0.05 * rng.standard_normal(last.shape)
    coils = make_coils(H, W, 2, seed=seed)
    traj = make_golden_angle_traj(4, 16, T, shape=(H, W))
    acq = RadialAcquisition(traj, coils)
    x = make_phantom(PhantomSpec(H=H, W=W, T=T, r_out=0.25, r_in0=0.15, heart_center=(0.5, 0.5),
                                 disks=())).frames
    y = np.stack([acq.forward(x[t], t) for t in range(T)])
    return model, acq, y


def _toy_loss(seed):
    """``(f, params, names)`` where ``f(*tensors)`` rebuilds the toy training loss."""
    model, acq, y = toy_problem(seed)
    config = TrainConfig(total_iters=3, model=model.config)
    t_idx = [0, 1]
    op = _BatchOperator(acq, t_idx)
    # every level trainable, so analytic and numeric gradients cover the same parameters
    windows = model.full_windows()
    params = model.params()

    def f(*ts):
        # point the networks at the caller's tensors
        k = 0
        for net in (model.dvf, model.canonical):
            L = len(net.tables)
            net.tables = list(ts[k:k + L])
            k += L
            dec = net.decoder
            for i in range(3):
                dec.weights[i], dec.biases[i] = ts[k], ts[k + 1]
                k += 2
        total, _, _ = build_loss(model, config, op, y, t_idx, windows)
        return total

    return f, [p.data.copy() for p in params], [p.name for p in params]


# hash interpolation is piecewise multilinear in the warped coordinates, so the
# step must stay below the typical distance to the next cell edge
E2E_EPS = 1e-8


def end_to_end_gradcheck(seed=0, max_checks=60, eps=E2E_EPS):
    """Worst per-coordinate relative error of the full training loss."""
    f, values, names = _toy_loss(seed)
    err, where = ad.gradcheck(f, values, eps=eps, max_checks=max_checks, seed=seed)
    return err, (names[where[0]], where[1]) if where else None


def directional_gradcheck(seed=0, n_dirs=4, eps=E2E_EPS):
    """Relative error of ``<grad, v>`` against central differences along random
    directions ``v`` that move every parameter at once."""
    f, values, _ = _toy_loss(seed)
    ts = [ad.Tensor(v, requires_grad=True) for v in values]
    with ad.Tape() as tape:
        loss = f(*ts)
    grads = ad.backward(loss, ts)
    tape.release()
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(v.shape) for v in values]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        fp = float(f(*[ad.Tensor(v + eps * d) for v, d in zip(values, dirs)]).data)
        fm = float(f(*[ad.Tensor(v - eps * d) for v, d in zip(values, dirs)]).data)
        numeric = (fp - fm) / (2 * eps)
        gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        worst = max(worst, abs(analytic - numeric) / max(gnorm, 1e-12))
    return worst


def gradcheck_suite(seed=0, tol=1e-4):
    rng = np.random.default_rng(seed)
    checks = []
    for name, (f, inputs) in _primitive_cases(rng).items():
        err, _ = ad.gradcheck(f, inputs)
        checks.append(Check("gradcheck", name, err, tol))
    err, _ = end_to_end_gradcheck(seed)
    checks.append(Check("gradcheck", "end-to-end loss 8x8 T=2", err, 1e-3))
    checks.append(Check("gradcheck", "end-to-end directional 8x8 T=2", directional_gradcheck(seed), 1e-3))
    return checks


# -- interpolation suite -----------------------------------------------------


def _slot(cfg, level, vertex):
    n = level_resolution(cfg, level)
    if (n + 1) ** cfg.dims <= cfg.table_size:
        return sum(int(v) * (n + 1) ** k for k, v in enumerate(vertex))
    h = 0
    for k, v in enumerate(vertex):
        h ^= (int(v) * PRIMES[k]) & 0xFFFFFFFFFFFFFFFF
    return h & (cfg.table_size - 1)


def interp_suite(seed=0):
    rng = np.random.default_rng(seed)
    checks = []
    for dims in (2, 3):
        cfg = HashGridConfig(levels=5, feats=3, dims=dims, table_size=2**7 if dims == 2 else 2**9)
        grid = HashGrid(cfg, [rng.standard_normal((level_entries(cfg, l), 3)) for l in range(1, 6)])
        v_err = c_err = 0.0
        for l in range(1, 6):
            n = level_resolution(cfg, l)
            sl = slice((l - 1) * 3, l * 3)
            verts = rng.integers(0, n + 1, (16, dims))
            got = encode(grid, verts / n)[:, sl]
            want = np.stack([grid.tables[l - 1][_slot(cfg, l, v)] for v in verts])
            v_err = max(v_err, np.abs(got - want).max())
            cells = rng.integers(0, n, (16, dims))
            got = encode(grid, (cells + 0.5) / n)[:, sl]
            want = np.stack([np.mean([grid.tables[l - 1][_slot(cfg, l, c + np.array(b))]
                                      for b in product((0, 1), repeat=dims)], axis=0) for c in cells])
            c_err = max(c_err, np.abs(got - want).max())
        checks.append(Check("interp", f"vertex exactness {dims}d", v_err, 1e-12))
        checks.append(Check("interp", f"cell-center average {dims}d", c_err, 1e-12))
        x = rng.random((20, dims))
        out = encode(grid, x, LevelWindow(1, 2))
        checks.append(Check("interp", f"levels above window zero {dims}d", float(np.abs(out[:, 6:]).max()), 1e-300))
        g = encode_backward(grid, x, LevelWindow(2, 3), np.ones((20, cfg.out_dim)))
        leak = max(np.abs(g[0]).max(), np.abs(g[3]).max(), np.abs(g[4]).max())
        checks.append(Check("interp", f"gradient outside window zero {dims}d", float(leak), 1e-300))
    return checks


def run(suite="all", seed=0):
    names = SUITES if suite == "all" else (suite,)
    table = {"adjoint": adjoint_suite, "gradcheck": gradcheck_suite, "interp": interp_suite}
    checks = []
    for name in names:
        if name not in table:
            raise ValueError(f"unknown suite {suite!r}")
        checks += table[name](seed=seed)
    return checks


def format_table(checks):
    width = max(len(c.name) for c in checks)
    lines = [f"{'suite':<10} {'check':<{width}} {'worst error':>12} {'tolerance':>10}  result"]
    for c in checks:
        lines.append(f"{c.suite:<10} {c.name:<{width}} {c.error:12.3e} {c.tol:10.1e}  "
                     f"{'PASS' if c.passed else 'FAIL'}")
    return "\n".join(lines)
