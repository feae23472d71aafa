"""Joint optimization of the DVF and canonical networks against measured k-t data."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import DataValidationError, DivergenceError, ShapeError
from .hashenc import LevelWindow, full_window, schedule_window
from .kspace import CartesianMask, ifft2c
from .nets import Model, ModelConfig, Windows, canonical_image, predict_frames

log = logging.getLogger(__name__)

SMOOTH_EPS = 1e-6


@dataclass
class TrainConfig:
    total_iters: int = 1200
    lr_tables: float = 1e-2
    lr_decoder: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    w_dc: float = 1.0
    w_u: float = 1.0
    w_grad: float = 1.0
    w_lap: float = 1.0
    w_temporal: float = 0.0
    frame_batch: int | None = None
    seed: int = 0
    disable_dvf_reg: bool = False
    disable_coarse2fine: bool = False
    mlp_decoder: bool = False
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    log_every: int = 100
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.validate()

    def validate(self):
        for name in ("w_dc", "w_u", "w_grad", "w_lap", "w_temporal"):
            if getattr(self, name) < 0:
                raise DataValidationError(f"{name} must be >= 0")
        if self.total_iters < 3:
            raise DataValidationError("total_iters must cover the three schedule stages (>= 3)")
        if self.frame_batch is not None and self.frame_batch < 1:
            raise DataValidationError("frame_batch must be >= 1")
        return self

    def effective_model(self):
        return self.model.with_mlp_decoder() if self.mlp_decoder else self.model

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


REPORT_COLUMNS = ("iter", "loss", "l_dc", "l_u", "l_grad", "l_lap", "l_temporal", "saturated",
                  "dvf_lo", "dvf_hi", "cano_lo", "cano_hi")


@dataclass
class TrainReport:
    """Per-iteration loss components. Timings are kept apart from the loss
    records so that two seeded runs can be compared byte for byte."""

    records: list = field(default_factory=list)
    elapsed: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    status: str = "running"

    def add(self, row, seconds):
        self.records.append(row)
        self.elapsed.append(seconds)

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.records:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in REPORT_COLUMNS])

    def timing_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("iter", "elapsed_s"))
            for r, s in zip(self.records, self.elapsed):
                w.writerow((r["iter"], f"{s:.6f}"))

    @staticmethod
    def read_csv(path):
        rep = TrainReport()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.records.append({k: (int(v) if k in ("iter", "saturated", "dvf_lo", "dvf_hi",
                                                        "cano_lo", "cano_hi") else float(v))
                                    for k, v in row.items()})
        return rep


# -- losses --------------------------------------------------------------------


def loss_dc(pred, target, eps=SMOOTH_EPS):
    """Mean smoothed complex modulus of the k-space residual.

    ``pred`` is a ``(..., 2)`` tensor, ``target`` a complex array of shape ``(...)``.
    """
    pred = ad.as_tensor(pred)
    target = np.asarray(target)
    if pred.shape[:-1] != target.shape:
        raise ShapeError(f"prediction {pred.shape[:-1]} and data {target.shape} differ")
    resid = ad.sub(pred, ad.to_pair(target, pred.dtype))
    return ad.mean(ad.cabs_smooth(resid, eps))


def loss_dvf_terms(u, eps=SMOOTH_EPS):
    """``(mean|u|, mean|Dx u| + mean|Dy u|, mean|lap u|)`` for ``u`` of shape ``(B, H, W, 2)``."""
    u = ad.as_tensor(u)
    l_u = ad.mean(ad.abs_smooth(u, eps))
    l_grad = ad.add(ad.mean(ad.abs_smooth(ad.finite_diff_x(u), eps)),
                    ad.mean(ad.abs_smooth(ad.finite_diff_y(u), eps)))
    l_lap = ad.mean(ad.abs_smooth(ad.laplacian2d(u), eps))
    return l_u, l_grad, l_lap


def loss_dvf(u, eps=SMOOTH_EPS):
    l_u, l_grad, l_lap = loss_dvf_terms(u, eps)
    return ad.add(ad.add(l_u, l_grad), l_lap)


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, p):
        return cls(np.zeros_like(p), np.zeros_like(p), 0)


def adam_step(param, grad, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of ``param`` in place.

    Returns False (and leaves everything untouched) when the gradient has
    non-finite entries.
    """
    if state.m.shape != param.shape or grad.shape != param.shape:
        raise ShapeError("Adam state, gradient and parameter shapes differ")
    if not np.all(np.isfinite(grad)):
        log.warning("skipping Adam step: non-finite gradient")
        return False
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * (grad * grad)
    step = lr / (1 - beta1**state.t)
    denom = np.sqrt(state.v / (1 - beta2**state.t)) + eps
    param -= (step * state.m / denom).astype(param.dtype, copy=False)
    return True


# -- data plumbing -------------------------------------------------------------


def data_scale(ds):
    """Factor that brings the time-averaged image to roughly unit peak."""
    acq = ds.acquisition(np.complex128)
    H, W, T, C = ds.shape
    y = ds.samples.astype(np.complex128)
    if isinstance(ds.sampling, CartesianMask):
        kept = ds.sampling.kept
        counts = np.maximum(kept.sum(axis=1), 1)
        acc = np.zeros((C, H, W), dtype=np.complex128)
        for t in range(T):
            acc[:, kept[:, t], :] += y[t]
        avg_k = acc / counts[None, :, None]
        avg = np.sum(np.conj(acq.coils) * ifft2c(avg_k), axis=0)
    else:
        avg = sum(acq.adjoint(y[t], t, density=True) for t in range(T)) / T
    peak = float(np.percentile(np.abs(avg), 99))
    return 1.0 / peak if peak > 0 else 1.0


class _BatchOperator:
    """Forward model and its adjoint for a batch of frames, on complex arrays."""

    def __init__(self, acq, t_idx):
        self.acq = acq
        self.t_idx = list(t_idx)

    def forward(self, z):
        return np.stack([self.acq.forward(z[b], t) for b, t in enumerate(self.t_idx)])

    def adjoint(self, y):
        return np.stack([self.acq.adjoint(y[b], t) for b, t in enumerate(self.t_idx)])


def windows_at(model: Model, config: TrainConfig, iteration):
    if config.disable_coarse2fine:
        return model.full_windows()
    dv = schedule_window("dvf", iteration, config.total_iters)
    ca = schedule_window("canonical", iteration, config.total_iters)
    L_d, L_c = model.config.dvf_grid.levels, model.config.canonical_grid.levels
    # the schedule is defined for the 10/12-level networks; clip for smaller ones
    dv = LevelWindow(min(dv.lo, L_d), min(dv.hi, L_d))
    ca = LevelWindow(min(ca.lo, L_c), min(ca.hi, L_c))
    return Windows(dv, ca)


def build_loss(model, config, op, y_batch, t_idx, windows):
    """Total loss tensor plus its components (all scalar tensors)."""
    img, u, n_sat = predict_frames(model, t_idx, windows)
    pred = ad.complex_linear(img, op.forward, op.adjoint, name="acquisition")
    l_dc = loss_dc(pred, y_batch)
    total = ad.scalar_mul(l_dc, config.w_dc)
    comps = {"l_dc": l_dc}
    if not config.disable_dvf_reg:
        l_u, l_grad, l_lap = loss_dvf_terms(u)
        comps.update(l_u=l_u, l_grad=l_grad, l_lap=l_lap)
        total = ad.add(total, ad.scalar_mul(l_u, config.w_u))
        total = ad.add(total, ad.scalar_mul(l_grad, config.w_grad))
        total = ad.add(total, ad.scalar_mul(l_lap, config.w_lap))
        if config.w_temporal > 0 and u.shape[0] > 1:
            l_t = ad.mean(ad.abs_smooth(ad.diff(u, 0), SMOOTH_EPS))
            comps["l_temporal"] = l_t
            total = ad.add(total, ad.scalar_mul(l_t, config.w_temporal))
    return total, comps, n_sat


def _frame_batches(T, batch, rng):
    """Endless stream of frame batches: cycles through seeded permutations."""
    if batch is None or batch >= T:
        while True:
            yield list(range(T))
    order = []
    while True:
        if len(order) < batch:
            order += rng.permutation(T).tolist()
        chosen, order = order[:batch], order[batch:]
        yield sorted(chosen)


def fit(ds, config: TrainConfig, callback=None):
    """Train a model on ``ds``; returns ``(model, report)``.

    ``callback(iteration, model, report)`` runs after every step when given.
    """
    config.validate()
    H, W, T, C = ds.shape
    rng = np.random.default_rng(config.seed)
    scale = data_scale(ds)
    model = Model(config.effective_model(), (H, W, T), rng=rng, dtype=np.float32, scale=scale)
    acq = ds.acquisition(np.complex64)
    y_all = (ds.samples.astype(np.complex128) * scale).astype(np.complex64)
    batches = _frame_batches(T, config.frame_batch, np.random.default_rng([config.seed, 7]))

    dec_params = model.dvf.decoder.params() + model.canonical.decoder.params()
    tables = [("dvf", l, t) for l, t in enumerate(model.dvf.tables, start=1)] + \
             [("canonical", l, t) for l, t in enumerate(model.canonical.tables, start=1)]
    states = {id(p): AdamState.like(p.data) for p in model.params()}

    report = TrainReport()
    t0 = time.perf_counter()
    initial = None
    bad_streak = 0
    for it in range(1, config.total_iters + 1):
        windows = windows_at(model, config, it)
        model.dvf.set_trainable(windows.dvf)
        model.canonical.set_trainable(windows.canonical)
        t_idx = next(batches)
        op = _BatchOperator(acq, t_idx)
        try:
            with ad.Tape() as tape:
                total, comps, n_sat = build_loss(model, config, op, y_all[t_idx], t_idx, windows)
            trainable = dec_params + [t for _, _, t in tables if t.requires_grad]
            grads = tape.backward(total, trainable)
        except ad.NonFiniteError as exc:
            report.status = "diverged"
            raise DivergenceError(f"non-finite values at iteration {it}: {exc}", report) from exc
        tape.release()
        for p, g in zip(trainable, grads):
            lr = config.lr_decoder if p in dec_params else config.lr_tables
            adam_step(p.data, g, states[id(p)], lr, config.beta1, config.beta2, config.adam_eps)

        loss_val = float(total.data)
        row = {"iter": it, "loss": loss_val}
        for k in ("l_dc", "l_u", "l_grad", "l_lap", "l_temporal"):
            row[k] = float(comps[k].data) if k in comps else 0.0
        row.update(saturated=n_sat, dvf_lo=windows.dvf.lo, dvf_hi=windows.dvf.hi,
                   cano_lo=windows.canonical.lo, cano_hi=windows.canonical.hi)
        report.add(row, time.perf_counter() - t0)
        if config.log_every and (it % config.log_every == 0 or it == 1):
            log.info("iter %5d  loss %.5f  dc %.5f  sat %d", it, loss_val, row["l_dc"], n_sat)
        if callback is not None:
            callback(it, model, report)

        if initial is None:
            initial = loss_val
        if not np.isfinite(loss_val) or loss_val > config.divergence_factor * initial:
            bad_streak += 1
            if bad_streak >= config.divergence_patience or not np.isfinite(loss_val):
                report.status = "diverged"
                raise DivergenceError(
                    f"loss {loss_val:.4g} exceeded {config.divergence_factor}x the initial "
                    f"{initial:.4g} for {bad_streak} iterations (iter {it})", report)
        else:
            bad_streak = 0
    report.status = "ok"
    return model, report


def final_windows(model, config):
    return windows_at(model, config, config.total_iters)


def reconstruct(model: Model, windows: Windows | None = None, batch=4):
    """Full sequence ``(T, H, W)`` complex, DVFs ``(T, H, W, 2)``, canonical ``(H, W)``."""
    frames = np.empty((model.T, model.H, model.W), dtype=np.complex128)
    dvf = np.empty((model.T, model.H, model.W, 2))
    for start in range(0, model.T, batch):
        idx = list(range(start, min(start + batch, model.T)))
        img, u, _ = predict_frames(model, idx, windows)
        frames[idx] = ad.to_complex(img.data.astype(np.float64)) / model.scale
        dvf[idx] = u.data
    return frames, dvf, canonical_image(model, windows)


def zero_filled(ds):
    """Adjoint baseline per frame (density-compensated for radial data)."""
    acq = ds.acquisition(np.complex128)
    H, W, T, C = ds.shape
    return np.stack([acq.adjoint(ds.samples[t].astype(np.complex128), t, density=True)
                     for t in range(T)])


def with_ablation(config: TrainConfig, name):
    table = {"no-dvf-reg": "disable_dvf_reg", "no-coarse2fine": "disable_coarse2fine",
             "mlp-decoder": "mlp_decoder"}
    if name not in table:
        raise ValueError(f"unknown ablation {name!r}")
    return replace(config, **{table[name]: True})
