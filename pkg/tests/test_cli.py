import csv
import json

import numpy as np
import pytest
from PIL import Image

from mocoinr import cli
from mocoinr.nets import ModelConfig
from mocoinr.phantom import load_dataset

SMALL_PHANTOM = {"H": 16, "W": 16, "T": 4, "r_out": 0.25, "r_in0": 0.15,
                 "heart_center": [0.5, 0.5], "disks": []}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def small_train(path):
    return write_json(path, {"schema_version": 1, "model": ModelConfig.desk(10).to_dict(),
                             "train": {"log_every": 0}})


@pytest.fixture
def dataset(tmp_path):
    cfg = write_json(tmp_path / "sim.json", {"schema_version": 1, "phantom": SMALL_PHANTOM,
                                             "sampling": {"kind": "radial", "spokes": 6}, "coils": 2})
    out = tmp_path / "d.ktd"
    assert cli.main(["simulate", cfg, "-o", str(out)]) == 0
    return out


def test_simulate_vista_summary(tmp_path, capsys):
    cfg = write_json(tmp_path / "v.json", {"schema_version": 1, "phantom": {"T": 4},
                                           "sampling": {"kind": "vista", "af": 8}})
    assert cli.main(["simulate", cfg, "-o", str(tmp_path / "v.ktd")]) == 0
    assert "8 lines/frame of 64" in capsys.readouterr().out
    ds = load_dataset(tmp_path / "v.ktd")
    assert ds.samples.shape[2] == 8


def test_simulate_radial_hardest_row_summary(tmp_path, capsys):
    cfg = write_json(tmp_path / "r.json", {"schema_version": 1, "phantom": {"T": 2},
                                           "sampling": {"kind": "radial", "spokes": 3}})
    assert cli.main(["simulate", cfg, "-o", str(tmp_path / "r.ktd")]) == 0
    assert "3 spokes/frame" in capsys.readouterr().out


@pytest.mark.parametrize("doc, path", [
    ({"schema_version": 1, "phantom": {}, "sampling": {"kind": "vista"}}, "sampling.af"),
    ({"schema_version": 1, "sampling": {"kind": "vista", "af": 4}}, "phantom"),
    ({"schema_version": 1, "phantom": {"H": "big"}, "sampling": {"kind": "vista", "af": 4}}, "phantom.H"),
    ({"schema_version": 1, "phantom": {"Hx": 4}, "sampling": {"kind": "vista", "af": 4}}, "phantom.Hx"),
    ({"schema_version": 2, "phantom": {}, "sampling": {"kind": "vista", "af": 4}}, "schema_version"),
    ({"schema_version": 1, "phantom": {"alpha": 1.5}, "sampling": {"kind": "vista", "af": 4}}, "phantom"),
])
def test_simulate_invalid_config_exits_2_without_output(tmp_path, capsys, doc, path):
    cfg = write_json(tmp_path / "bad.json", doc)
    out = tmp_path / "never.ktd"
    assert cli.main(["simulate", cfg, "-o", str(out)]) == 2
    assert f"invalid config: {path}:" in capsys.readouterr().err
    assert not out.exists()


def test_invalid_train_config_exits_2(tmp_path, dataset):
    cfg = write_json(tmp_path / "t.json", {"schema_version": 1, "train": {"w_lap": -1.0}})
    assert cli.main(["recon", str(dataset), str(tmp_path / "r"), "--config", cfg]) == 2


def test_recon_artifacts_eval_and_determinism(tmp_path, dataset):
    train = small_train(tmp_path / "t.json")
    before = dataset.read_bytes()
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["recon", str(dataset), str(out), "--config", train, "--iters", "6",
                         "--seed", "5", "--frame-batch", "2"]) == 0
        outs.append(out)
    a, b = outs
    assert dataset.read_bytes() == before
    assert len(list(a.glob("*.pgm"))) == 4 + 2
    with Image.open(a / "frame_000.pgm") as im:
        assert im.mode == "L" and im.size == (16, 16)
    for name in ("report.csv", "model.ckpt", "recon.cplx", "quiver.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    resolved = json.loads((a / "config.json").read_text())
    assert resolved["train"]["seed"] == 5 and resolved["train"]["total_iters"] == 6

    assert cli.main(["eval", str(a), str(dataset)]) == 0
    with open(a / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == cli.METRICS_HEADER
    assert [r["method"] for r in rows] == ["moco-inr", "zero-filled"]
    for r in rows:
        assert r["seed"] == "5"
        for k in ("psnr", "ssim", "nrmse_roi"):
            float(r[k])


def test_eval_recon_against_itself(tmp_path, dataset):
    ds = load_dataset(dataset)
    meta = {"seed": 0}
    cli.write_recon_dir(tmp_path, ds.gt_frames.astype(np.complex128), np.zeros(ds.gt_dvf.shape),
                        ds.gt_frames[0], meta)
    assert cli.main(["eval", str(tmp_path), str(dataset)]) == 0
    with open(tmp_path / "metrics.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["psnr"]) == float("inf")
    assert float(row["ssim"]) == 1.0 and float(row["nrmse_roi"]) == 0.0


def test_eval_without_ground_truth_exits_4(tmp_path, dataset):
    from mocoinr.phantom import save_dataset
    ds = load_dataset(dataset)
    ds.gt_frames = ds.gt_dvf = ds.roi = None
    nogt = tmp_path / "nogt.ktd"
    save_dataset(ds, nogt)
    cli.write_recon_dir(tmp_path, np.zeros((4, 16, 16), complex), np.zeros((4, 16, 16, 2)),
                        np.zeros((16, 16), complex), {})
    assert cli.main(["eval", str(tmp_path), str(nogt)]) == 4


def test_recon_divergence_exits_3(tmp_path, dataset, monkeypatch):
    from mocoinr.errors import DivergenceError
    from mocoinr.trainer import TrainReport

    def boom(ds, cfg, callback=None):
        rep = TrainReport()
        rep.add({c: 0 for c in ("iter", "loss", "l_dc", "l_u", "l_grad", "l_lap", "l_temporal", "saturated",
                                "dvf_lo", "dvf_hi", "cano_lo", "cano_hi")}, 0.0)
        rep.status = "diverged"
        raise DivergenceError("loss blew up", rep)

    monkeypatch.setattr(cli, "fit", boom)
    out = tmp_path / "r"
    assert cli.main(["recon", str(dataset), str(out)]) == 3
    assert (out / "report.csv").exists()


def test_verify_exit_codes(monkeypatch, capsys):
    assert cli.main(["verify", "adjoint"]) == 0
    assert "PASS" in capsys.readouterr().out
    from mocoinr import verify
    monkeypatch.setattr(verify, "run", lambda suite, seed=0: [verify.Check("adjoint", "broken", 1.0, 1e-3)])
    assert cli.main(["verify", "adjoint"]) == 1
    assert "adjoint/broken" in capsys.readouterr().err


def test_threads_default_from_env(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli.default_threads() == 3
    monkeypatch.setenv(cli.THREADS_ENV, "junk")
    assert cli.default_threads() == 1
    monkeypatch.delenv(cli.THREADS_ENV)
    assert cli.default_threads() == 1
