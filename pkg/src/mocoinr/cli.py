"""Command-line entry point: simulate, recon, eval, verify.

Exit codes: 0 success, 1 verification failure, 2 invalid configuration,
3 training divergence, 4 dataset without ground truth.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import container, verify
from .errors import DataValidationError, DivergenceError
from .kspace import CartesianMask
from .metrics import PEAK_PERCENTILE, evaluate
from .nets import ModelConfig, save_checkpoint
from .phantom import PhantomSpec, load_dataset, save_dataset, simulate
from .sampling import nominal_radial_af
from .trainer import TrainConfig, fit, reconstruct, with_ablation, zero_filled

log = logging.getLogger("mocoinr")

SCHEMA_VERSION = 1
RECON_MAGIC = b"MCRC"
THREADS_ENV = "MOCOINR_THREADS"
METRICS_HEADER = ("dataset_id", "method", "seed", "psnr", "ssim", "nrmse_roi")
QUIVER_STEP = 4
ABLATIONS = ("no-dvf-reg", "no-coarse2fine", "mlp-decoder")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED, EXIT_NO_GT = 0, 1, 2, 3, 4


class ConfigError(Exception):
    """Invalid configuration; ``path`` is the dotted location of the bad field."""

    def __init__(self, path, message):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


# -- configuration schemas -------------------------------------------------------

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

SIMULATE_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "phantom", "sampling"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "phantom": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "H": _POS_INT, "W": _POS_INT, "T": _POS_INT,
                "body_center": _PAIR, "body_axes": _PAIR, "body_intensity": _NUM,
                "heart_center": _PAIR, "r_out": _NUM, "r_in0": _NUM,
                "myo_intensity": _NUM, "blood_intensity": _NUM, "alpha": _NUM,
                "disks": {"type": "array",
                          "items": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4}},
                "supersample": _POS_INT,
            },
        },
        "sampling": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["kind", "af"],
                 "properties": {"kind": {"const": "vista"}, "af": {"type": "number", "exclusiveMinimum": 0}}},
                {"type": "object", "additionalProperties": False, "required": ["kind", "spokes"],
                 "properties": {"kind": {"const": "radial"}, "spokes": _POS_INT,
                                "readout": _POS_INT, "base_angle": _NUM}},
            ],
        },
        "coils": _POS_INT,
        "noise_sigma": {"type": "number", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
    },
}

_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"model"}

TRAIN_SCHEMA = {
    "type": "object",
    "required": ["schema_version"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {name: {"type": ["number", "boolean", "null"]} for name in _TRAIN_FIELDS},
        },
        "model": {"type": "object"},
        "model_preset": {"enum": ["desk", "paper"]},
    },
}


def _field_path(err):
    parts = list(err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    if err.validator == "additionalProperties" and "'" in err.message:
        parts.append(err.message.split("'")[1])
    return ".".join(str(p) for p in parts)


def _validate(doc, schema):
    errors = sorted(jsonschema.Draft7Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        # oneOf failures are more useful reported from the closest branch
        if err.context:
            err = min(err.context, key=lambda e: (len(e.absolute_path) == 0, e.validator == "const"))
        raise ConfigError(_field_path(err), err.message)


def load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"not valid JSON ({exc})") from exc


def parse_simulate_config(doc):
    """Validated ``(PhantomSpec, sampling, coils, noise_sigma, seed)``."""
    _validate(doc, SIMULATE_SCHEMA)
    spec = PhantomSpec(**doc["phantom"])
    try:
        spec.validate()
    except DataValidationError as exc:
        raise ConfigError("phantom", str(exc)) from exc
    return spec, dict(doc["sampling"]), doc.get("coils", 4), doc.get("noise_sigma", 0.0), doc.get("seed", 0)


def parse_train_config(doc, overrides=None):
    """TrainConfig from a train document (may be empty) plus CLI overrides."""
    doc = doc or {"schema_version": SCHEMA_VERSION}
    _validate(doc, TRAIN_SCHEMA)
    kw = dict(doc.get("train", {}))
    kw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "model" in doc:
        try:
            kw["model"] = ModelConfig.from_dict(doc["model"])
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError("model", str(exc)) from exc
    elif doc.get("model_preset") == "paper":
        kw["model"] = ModelConfig.paper()
    try:
        return TrainConfig(**kw)
    except DataValidationError as exc:
        name = str(exc).split()[0]
        raise ConfigError(f"train.{name}" if name in _TRAIN_FIELDS else "train", str(exc)) from exc


# -- artifact writers ------------------------------------------------------------


def to_uint8(mag, peak):
    return np.clip(np.round(255.0 * mag / max(peak, 1e-12)), 0, 255).astype(np.uint8)


def write_pgm(path, img8):
    Image.fromarray(img8, mode="L").save(path, format="PPM")


def write_quiver(path, dvf, step=QUIVER_STEP):
    """Sub-sampled displacement vectors in pixel units, one row per (t, x, y)."""
    T, H, W, _ = dvf.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "x", "y", "dx", "dy"))
        for t in range(T):
            for y in range(step // 2, H, step):
                for x in range(step // 2, W, step):
                    w.writerow((t, x, y, f"{dvf[t, y, x, 0] * W:.6f}", f"{dvf[t, y, x, 1] * H:.6f}"))


def write_recon_dir(out, frames, dvf, canonical, meta):
    out = Path(out)
    T = frames.shape[0]
    mags = np.abs(frames)
    peak = float(np.percentile(mags, PEAK_PERCENTILE))
    for t in range(T):
        write_pgm(out / f"frame_{t:03d}.pgm", to_uint8(mags[t], peak))
    write_pgm(out / "canonical.pgm", to_uint8(np.abs(canonical), peak))
    H, W = frames.shape[1:]
    dmag = np.hypot(dvf[..., 0] * W, dvf[..., 1] * H).max(axis=0)
    write_pgm(out / "dvf_mag.pgm", to_uint8(dmag, dmag.max()))
    write_quiver(out / "quiver.csv", dvf)
    container.write(out / "recon.cplx", RECON_MAGIC, meta, {
        "frames": frames.astype(np.complex64),
        "dvf": dvf.astype(np.float32),
        "canonical": canonical.astype(np.complex64),
    })


def read_recon(path):
    return container.read(Path(path) / "recon.cplx" if Path(path).is_dir() else path, RECON_MAGIC)


# -- commands --------------------------------------------------------------------


def sampling_summary(ds):
    H, W, T, C = ds.shape
    if isinstance(ds.sampling, CartesianMask):
        lines = int(ds.sampling.kept[:, 0].sum())
        return f"cartesian: {lines} lines/frame of {H}, nominal AF {ds.sampling.acceleration():.2f}, T={T}, C={C}"
    S = ds.sampling.spokes_per_frame
    return (f"radial: {S} spokes/frame, readout {ds.sampling.readout}, "
            f"nominal AF {nominal_radial_af(S, max(H, W)):.2f}, T={T}, C={C}")


def cmd_simulate(args):
    spec, sampling, C, sigma, seed = parse_simulate_config(load_json(args.config))
    if args.seed is not None:
        seed = args.seed
    try:
        ds = simulate(spec, sampling, C=C, noise_sigma=sigma, seed=seed)
    except DataValidationError as exc:
        raise ConfigError("sampling", str(exc)) from exc
    save_dataset(ds, args.output)
    print(sampling_summary(ds))
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_recon(args):
    doc = load_json(args.config) if args.config else None
    cfg = parse_train_config(doc, {"seed": args.seed, "total_iters": args.iters, "frame_batch": args.frame_batch})
    for name in args.ablate or ():
        cfg = with_ablation(cfg, name)
    ds = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "train": {k: v for k, v in cfg.to_dict().items()
                                                              if k != "model"},
                   "model": cfg.model.to_dict(), "ablate": list(args.ablate or ())}, fh, indent=2, sort_keys=True)
    try:
        model, report = fit(ds, cfg)
    except DivergenceError as exc:
        if exc.report is not None:
            exc.report.to_csv(out / "report.csv")
            exc.report.timing_to_csv(out / "timing.csv")
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    report.to_csv(out / "report.csv")
    report.timing_to_csv(out / "timing.csv")
    save_checkpoint(model, out / "model.ckpt", iteration=cfg.total_iters, seed=cfg.seed)
    frames, dvf, canonical = reconstruct(model)
    meta = {"seed": cfg.seed, "iters": cfg.total_iters, "ablate": list(args.ablate or ()),
            "dataset_id": container.payload_digest(args.dataset)[:16]}
    write_recon_dir(out, frames, dvf, canonical, meta)
    dc = report.column("l_dc")
    print(f"{cfg.total_iters} iterations, L_DC {dc[0]:.4g} -> {dc[-1]:.4g}; wrote {out}")
    return EXIT_OK


def format_metric(v):
    return repr(float(v))


def cmd_eval(args):
    ds = load_dataset(args.dataset)
    if not ds.has_ground_truth:
        print("dataset has no ground truth; nothing to evaluate against", file=sys.stderr)
        return EXIT_NO_GT
    meta, arrays = read_recon(args.recon)
    H, W = ds.gt_frames.shape[1:]
    roi = ds.roi if ds.roi is not None else np.ones((H, W), bool)
    gt = ds.gt_frames.astype(np.complex128)
    dataset_id = container.payload_digest(args.dataset)[:16]
    rows = [
        ("moco-inr", evaluate(gt, arrays["frames"].astype(np.complex128), roi)),
        ("zero-filled", evaluate(gt, zero_filled(ds), roi)),
    ]
    out = Path(args.output) if args.output else Path(args.recon) / "metrics.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for method, m in rows:
            w.writerow((dataset_id, method, meta.get("seed", ""), format_metric(m["psnr"]),
                        format_metric(m["ssim"]), format_metric(m["nrmse_roi"])))
    with open(out.with_suffix(".json"), "w") as fh:
        json.dump({"magnitude": True, "normalization": f"reference {PEAK_PERCENTILE}th percentile",
                   "ssim": "11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03",
                   "nrmse": "pooled RMS over ROI and frames"}, fh, indent=2)
    for method, m in rows:
        print(f"{method:<12} psnr {m['psnr']:.3f}  ssim {m['ssim']:.4f}  nrmse_roi {m['nrmse_roi']:.4f}")
    return EXIT_OK


def cmd_verify(args):
    checks = verify.run(args.suite, seed=args.seed)
    print(verify.format_table(checks))
    failed = [c for c in checks if not c.passed]
    if failed:
        print("failed: " + ", ".join(f"{c.suite}/{c.name}" for c in failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------


def default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def build_parser():
    p = argparse.ArgumentParser(prog="mocoinr", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help=f"BLAS/FFT thread count (default ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a phantom k-t dataset from a JSON config")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("recon", help="train the networks on a dataset and write artifacts")
    r.add_argument("dataset")
    r.add_argument("out")
    r.add_argument("--config", help="JSON train config")
    r.add_argument("--seed", type=int)
    r.add_argument("--iters", type=int)
    r.add_argument("--frame-batch", type=int)
    r.add_argument("--ablate", action="append", choices=ABLATIONS)
    r.set_defaults(func=cmd_recon)

    e = sub.add_parser("eval", help="score a reconstruction against the dataset ground truth")
    e.add_argument("recon", help="recon directory or recon.cplx file")
    e.add_argument("dataset")
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the double-precision oracle suites")
    v.add_argument("suite", nargs="?", default="all", choices=verify.SUITES + ("all",))
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else default_threads()
    try:
        with threadpool_limits(threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
