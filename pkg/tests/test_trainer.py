import numpy as np
import pytest

from mocoinr import autodiff as ad
from mocoinr.errors import DataValidationError, DivergenceError, ShapeError
from mocoinr.nets import ModelConfig
from mocoinr.phantom import PhantomSpec, simulate
from mocoinr.trainer import (
    AdamState, TrainConfig, TrainReport, adam_step, fit, loss_dc, loss_dvf, loss_dvf_terms,
    reconstruct, windows_at, with_ablation, zero_filled,
)


def small_ds(kind="radial", T=4, seed=0):
    samp = {"kind": "radial", "spokes": 6} if kind == "radial" else {"kind": "vista", "af": 4}
    return simulate(PhantomSpec(H=16, W=16, T=T, r_out=0.25, r_in0=0.15, heart_center=(0.5, 0.5),
                                disks=()), samp, C=2, seed=seed)


def small_cfg(**kw):
    base = dict(total_iters=12, model=ModelConfig.desk(log2_table=10), log_every=0)
    base.update(kw)
    return TrainConfig(**base)


def pair(z):
    return ad.Tensor(np.stack([z.real, z.imag], axis=-1))


# -- losses ----------------------------------------------------------------


def test_loss_dc_examples(rng):
    y = rng.standard_normal((2, 3, 5)) + 1j * rng.standard_normal((2, 3, 5))
    assert float(loss_dc(pair(y), y).data) < 1e-5
    c = 0.3 - 0.4j
    assert float(loss_dc(pair(y + c), y).data) == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ShapeError):
        loss_dc(pair(y), y[:1])


def test_loss_dc_matches_scalar_recomputation(rng):
    y = rng.standard_normal((2, 7)) + 1j * rng.standard_normal((2, 7))
    yhat = rng.standard_normal((2, 7)) + 1j * rng.standard_normal((2, 7))
    total = 0.0
    for a, b in zip(yhat.ravel(), y.ravel()):
        re, im = a.real - b.real, a.imag - b.imag
        total += (re * re + im * im + 1e-12) ** 0.5
    assert float(loss_dc(pair(yhat), y).data) == pytest.approx(total / y.size, rel=1e-12)


def test_loss_dvf_examples():
    assert float(loss_dvf(np.zeros((2, 6, 6, 2))).data) < 1e-5
    u = np.full((1, 6, 6, 2), -0.2)
    l_u, l_g, l_l = (float(t.data) for t in loss_dvf_terms(u))
    assert l_u == pytest.approx(0.2, abs=1e-6)
    assert l_g < 1e-5 and l_l < 1e-5
    # ramp along x with slope 0.05 per pixel in both components
    ramp = np.broadcast_to(0.05 * np.arange(8)[None, None, :, None], (1, 8, 8, 2)).copy()
    l_u, l_g, l_l = (float(t.data) for t in loss_dvf_terms(ramp))
    assert l_l < 1e-5
    # mean |Dx u| = slope, mean |Dy u| = 0
    assert l_g == pytest.approx(0.05, abs=1e-5)


# -- Adam ------------------------------------------------------------------


def test_adam_first_step_is_lr():
    p = np.array([1.0])
    st = AdamState.like(p)
    adam_step(p, np.array([1.0]), st, 0.01)
    assert p[0] == pytest.approx(0.99, abs=1e-8)


def test_adam_zero_gradient_no_change():
    p = np.array([0.5, -2.0])
    st = AdamState.like(p)
    for _ in range(5):
        adam_step(p, np.zeros(2), st, 0.1)
    np.testing.assert_array_equal(p, [0.5, -2.0])


def test_adam_elementwise_independence():
    p = np.array([0.3, 0.3])
    st = AdamState.like(p)
    for g in (0.5, -1.0, 2.0):
        adam_step(p, np.array([g, g]), st, 0.05)
    assert p[0] == p[1]


def test_adam_matches_closed_form_sequence(rng):
    grads = rng.standard_normal(6)
    p = np.array([0.0])
    st = AdamState.like(p)
    m = v = 0.0
    ref = 0.0
    for t, g in enumerate(grads, start=1):
        adam_step(p, np.array([g]), st, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert p[0] == pytest.approx(ref, rel=1e-12)


def test_adam_skips_non_finite(caplog):
    p = np.array([1.0])
    st = AdamState.like(p)
    assert adam_step(p, np.array([np.nan]), st, 0.1) is False
    assert p[0] == 1.0 and st.t == 0
    assert "non-finite" in caplog.text
    with pytest.raises(ShapeError):
        adam_step(p, np.zeros(2), st, 0.1)


# -- configuration ---------------------------------------------------------


def test_config_validation():
    with pytest.raises(DataValidationError):
        TrainConfig(total_iters=2)
    with pytest.raises(DataValidationError):
        TrainConfig(w_lap=-1)
    cfg = TrainConfig(model=ModelConfig.desk(10).to_dict())
    assert isinstance(cfg.model, ModelConfig)
    assert with_ablation(cfg, "mlp-decoder").effective_model().kernel == 1
    with pytest.raises(ValueError):
        with_ablation(cfg, "no-such-thing")


# -- training --------------------------------------------------------------


def test_fit_logs_decomposable_losses_and_reconstructs():
    ds = small_ds()
    cfg = small_cfg(w_u=0.5, w_grad=2.0, w_lap=0.25)
    model, rep = fit(ds, cfg)
    assert len(rep.records) == 12 and rep.status == "ok"
    for r in rep.records:
        recomputed = r["l_dc"] + 0.5 * r["l_u"] + 2.0 * r["l_grad"] + 0.25 * r["l_lap"]
        assert recomputed == pytest.approx(r["loss"], rel=1e-6)
    frames, dvf, cano = reconstruct(model)
    assert frames.shape == (4, 16, 16) and np.iscomplexobj(frames)
    assert dvf.shape == (4, 16, 16, 2) and cano.shape == (16, 16)


def test_schedule_windows_logged_and_frozen_levels_untouched():
    ds = small_ds()
    cfg = small_cfg(total_iters=9)
    snaps = {}

    def cb(it, model, rep):
        if it in (3, 6, 9):
            snaps[it] = [t.data.copy() for t in model.dvf.tables + model.canonical.tables]

    model, rep = fit(ds, cfg, callback=cb)
    assert [(r["dvf_lo"], r["dvf_hi"]) for r in rep.records] == [(1, 6)] * 3 + [(4, 8)] * 3 + [(6, 10)] * 3
    n_dvf = len(model.dvf.tables)
    # DVF levels 1-3 frozen after stage 1, 1-5 after stage 2; canonical 1-5 then 1-7
    for lv in range(3):
        assert np.array_equal(snaps[3][lv], snaps[9][lv])
    for lv in range(5):
        assert np.array_equal(snaps[6][lv], snaps[9][lv])
        assert np.array_equal(snaps[3][n_dvf + lv], snaps[9][n_dvf + lv])
    for lv in range(7):
        assert np.array_equal(snaps[6][n_dvf + lv], snaps[9][n_dvf + lv])
    # active levels do move
    assert not np.array_equal(snaps[6][8], snaps[9][8])


def test_no_coarse2fine_uses_full_windows():
    ds = small_ds()
    model, rep = fit(ds, small_cfg(total_iters=3, disable_coarse2fine=True))
    assert all((r["dvf_lo"], r["dvf_hi"], r["cano_lo"], r["cano_hi"]) == (1, 10, 1, 12) for r in rep.records)
    assert windows_at(model, small_cfg(disable_coarse2fine=True), 1) == model.full_windows()


def test_disable_dvf_reg_zeroes_terms():
    ds = small_ds()
    _, rep = fit(ds, small_cfg(total_iters=3, disable_dvf_reg=True))
    assert all(r["l_u"] == 0 and r["loss"] == r["l_dc"] for r in rep.records)


def test_temporal_term_behind_flag():
    ds = small_ds()
    _, rep = fit(ds, small_cfg(total_iters=3, w_temporal=1.0))
    assert all(r["l_temporal"] >= 0 for r in rep.records)
    _, rep = fit(ds, small_cfg(total_iters=3))
    assert all(r["l_temporal"] == 0 for r in rep.records)


def test_seeded_runs_bit_identical(tmp_path):
    ds = small_ds("vista")
    cfg = small_cfg(total_iters=6, frame_batch=2, seed=3)
    m1, r1 = fit(ds, cfg)
    m2, r2 = fit(ds, cfg)
    r1.to_csv(tmp_path / "a.csv")
    r2.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for a, b in zip(m1.params(), m2.params()):
        assert np.array_equal(a.data, b.data)
    back = TrainReport.read_csv(tmp_path / "a.csv")
    assert back.records == r1.records


def test_divergence_guard():
    ds = small_ds()
    cfg = small_cfg(total_iters=30, divergence_patience=4)

    def blow_up(it, model, rep):
        for w in model.canonical.decoder.weights:
            w.data *= 3.0

    with pytest.raises(DivergenceError) as info:
        fit(ds, cfg, callback=blow_up)
    assert info.value.report.status == "diverged"
    assert len(info.value.report.records) < 30


def test_zero_filled_shapes():
    for kind in ("radial", "vista"):
        ds = small_ds(kind)
        assert zero_filled(ds).shape == (4, 16, 16)
