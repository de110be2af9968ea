"""Command-line entry point: ``python -m eegmtl <command>``.

Configuration precedence is built-in defaults < ``--config`` JSON file <
explicit flags. Outputs go to ``--out`` or, when that is omitted, to the
directory named by ``EEGMTL_OUT`` (default ``./eegmtl-out``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from . import data as D
from .gradcheck import run_suite
from .model import ModelConfig, MTLTransformer, load_model, save_weights
from .training import (
    DEFAULT_WEIGHTS,
    NonFiniteGradient,
    NumericAbort,
    TrainConfig,
    evaluate,
    predict,
    run_sweep,
    sweep_csv,
    sweep_summary,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECK_FAILED = 5

OUT_ENV = "EEGMTL_OUT"
DEFAULT_DESK_LR = 1e-3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "eegmtl-out"))


def _out_path(args, default_name) -> Path:
    if args.out:
        return Path(args.out)
    return default_out_dir() / default_name


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def _merge(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    out = dict(defaults)
    out.update({k: v for k, v in file_cfg.items() if k in defaults})
    out.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return out


def _read_dataset(path) -> D.Dataset:
    try:
        return D.read_container(path)
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from exc
    except D.ContainerError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _model_config(args, file_cfg, variant=None) -> ModelConfig:
    preset = args.preset or file_cfg.get("preset", "desk")
    try:
        cfg = ModelConfig.preset(preset, **file_cfg.get("model", {}))
        if variant:
            cfg = cfg.with_variant(variant)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _train_config(args, file_cfg, preset) -> TrainConfig:
    defaults = TrainConfig().to_dict()
    if preset == "desk":
        defaults["base_lr"] = DEFAULT_DESK_LR
    flags = {"epochs": getattr(args, "epochs", None), "base_lr": getattr(args, "lr", None),
             "batch_size": getattr(args, "batch_size", None), "seed": args.seed,
             "alpha_recon": getattr(args, "alpha_recon", None), "alpha_pupil": getattr(args, "alpha_pupil", None),
             "l2_coeff": getattr(args, "l2", None), "optimizer": getattr(args, "optimizer", None)}
    merged = _merge(defaults, file_cfg.get("train", {}), flags)
    if getattr(args, "no_clip", False):
        merged["clip_norm"] = None
    try:
        return TrainConfig.from_dict(merged)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _split(ds, seed):
    try:
        return D.split(ds, seed=seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _check_geometry(cfg: ModelConfig, ds: D.Dataset):
    if (cfg.channels, cfg.timesteps) != (ds.channels, ds.timesteps):
        raise DataError(f"geometry mismatch: model expects {cfg.channels}x{cfg.timesteps}, "
                        f"data is {ds.channels}x{ds.timesteps}")


# -- commands ------------------------------------------------------------------------
def cmd_gen(args) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    file_cfg = _load_config(args.config)
    cfg = _model_config(args, file_cfg)
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    ds = D.generate_synthetic(args.n, cfg.channels, cfg.timesteps, seed, with_pupil=not args.no_pupil)
    out = _out_path(args, "data.eegc")
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        D.write_container(out, ds)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    print(f"wrote {out}: n={len(ds)} channels={ds.channels} timesteps={ds.timesteps} "
          f"has_pupil={ds.has_pupil} seed={seed}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _load_config(args.config)
    ds = _read_dataset(args.data)
    mcfg = _model_config(args, file_cfg, args.variant)
    if mcfg.use_pupil and not ds.has_pupil:
        raise DataError(f"variant {args.variant} needs pupil targets but {args.data} has the has-pupil flag unset")
    _check_geometry(mcfg, ds)
    tcfg = _train_config(args, file_cfg, mcfg.scale_preset)
    tr, va, te = _split(ds, tcfg.seed)
    model = MTLTransformer(mcfg, tcfg.seed)
    report = train(model, tr, va, tcfg, te)
    out = _out_path(args, "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.tsv").write_text(report.to_table())
    save_weights(model, out / "best.eegw", {"split_seed": tcfg.seed, "best_epoch": report.best_epoch})
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _read_dataset(args.data)
    model, meta = _load_checkpoint(args.checkpoint)
    _check_geometry(model.cfg, ds)
    part = _pick_split(ds, args.split, meta, args.seed)
    print(f"rmse_mm={evaluate(model, part):.6f} split={args.split} n={len(part)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    file_cfg = _load_config(args.config)
    ds = _read_dataset(args.data)
    mcfg = _model_config(args, file_cfg, "mtl1")
    _check_geometry(mcfg, ds)
    tcfg = _train_config(args, file_cfg, mcfg.scale_preset)
    weights = args.weights if args.weights is not None else file_cfg.get("weights", list(DEFAULT_WEIGHTS))
    seeds = args.seeds if args.seeds is not None else file_cfg.get("seeds", [0, 1, 2])

    def make_model(seed, **w):
        return MTLTransformer(mcfg.replace(**w), seed)

    def on_row(r):
        status = "failed: " + r.error if r.error else f"test_rmse={r.test_rmse:.4f}"
        print(f"weight={r.weight:g} seed={r.seed} {status}", file=sys.stderr)

    try:
        rows = run_sweep(weights, seeds, make_model, lambda s: _split(ds, s), tcfg, on_row=on_row)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_path(args, "sweep.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(sweep_csv(rows))
    for w, (m, s, n) in sweep_summary(rows).items():
        print(f"weight={w:g} test_rmse_mm={m:.4f} +- {s:.4f} (n={n})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_suite(tol=args.tol, eps=args.eps, seed=args.seed or 0, include_model=not args.layers_only)
    failed = 0
    for rep in reports:
        for line in rep.lines():
            if args.verbose or line.startswith("FAIL"):
                print(line)
        failed += len(rep.failures())
    worst = max(r.max_rel_error for r in reports)
    print(f"{len(reports)} checks, {failed} failing tensors, worst relative error {worst:.3e} (tol {args.tol:g})")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def cmd_plot(args) -> int:
    ds = _read_dataset(args.data)
    model, meta = _load_checkpoint(args.checkpoint)
    _check_geometry(model.cfg, ds)
    part = _pick_split(ds, args.split, meta, args.seed)
    pred = predict(model, part)
    out = _out_path(args, "scatter.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(scatter_csv(part.gaze, pred))
    print(f"wrote {out} ({len(part)} rows)")
    if not args.no_svg:
        svg = out.with_suffix(".svg")
        svg.write_text(scatter_svg(part.gaze, pred))
        print(f"wrote {svg}")
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc
    except (D.ContainerError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _pick_split(ds, name, meta, seed):
    if name == "all":
        return ds
    split_seed = seed if seed is not None else meta.get("split_seed", 0)
    tr, va, te = _split(ds, split_seed)
    return {"train": tr, "val": va, "test": te}[name]


# -- plot artifacts --------------------------------------------------------------------
def scatter_csv(true, pred) -> str:
    lines = ["true_x,true_y,pred_x,pred_y"]
    for t, p in zip(np.asarray(true, np.float64).tolist(), np.asarray(pred, np.float64).tolist()):
        lines.append(",".join(repr(v) for v in (*t, *p)))
    return "\n".join(lines) + "\n"


def scatter_svg(true, pred, screen_mm=D.SyntheticSpec().screen_mm, size=(640, 520)) -> str:
    """True positions as circles, predictions as crosses, on a millimetre frame."""
    W, H = size
    pad = 50
    sx = (W - 2 * pad) / screen_mm[0]
    sy = (H - 2 * pad) / screen_mm[1]

    def xy(p):
        return pad + p[0] * sx, pad + p[1] * sy

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(W), height=str(H))
    ET.SubElement(svg, "rect", x=str(pad), y=str(pad), width=f"{screen_mm[0] * sx:.2f}",
                  height=f"{screen_mm[1] * sy:.2f}", fill="none", stroke="black")
    for i, v in enumerate(np.linspace(0, screen_mm[0], 5)):
        t = ET.SubElement(svg, "text", x=f"{pad + v * sx:.1f}", y=str(H - pad + 18), **{"font-size": "11"})
        t.text = f"{v:g}"
    for v in np.linspace(0, screen_mm[1], 4):
        t = ET.SubElement(svg, "text", x="8", y=f"{pad + v * sy:.1f}", **{"font-size": "11"})
        t.text = f"{v:g}"
    lab = ET.SubElement(svg, "text", x=str(W // 2 - 20), y=str(H - 8), **{"font-size": "12"})
    lab.text = "x (mm)"
    lab = ET.SubElement(svg, "text", x="8", y="20", **{"font-size": "12"})
    lab.text = "y (mm)"
    g_true = ET.SubElement(svg, "g", id="true")
    for p in np.asarray(true, np.float64):
        cx, cy = xy(p)
        ET.SubElement(g_true, "circle", cx=f"{cx:.2f}", cy=f"{cy:.2f}", r="3", fill="none", stroke="#1f77b4",
                      **{"class": "glyph"})
    g_pred = ET.SubElement(svg, "g", id="pred")
    for p in np.asarray(pred, np.float64):
        cx, cy = xy(p)
        d = f"M{cx - 3:.2f},{cy - 3:.2f} L{cx + 3:.2f},{cy + 3:.2f} M{cx - 3:.2f},{cy + 3:.2f} L{cx + 3:.2f},{cy - 3:.2f}"
        ET.SubElement(g_pred, "path", d=d, stroke="#d62728", **{"class": "glyph"})
    legend = ET.SubElement(svg, "g", id="legend")
    ET.SubElement(legend, "circle", cx=str(W - 150), cy="20", r="4", fill="none", stroke="#1f77b4")
    t = ET.SubElement(legend, "text", x=str(W - 140), y="24", **{"font-size": "12"})
    t.text = "true position"
    ET.SubElement(legend, "path", d=f"M{W - 154},36 L{W - 146},44 M{W - 154},44 L{W - 146},36", stroke="#d62728")
    t = ET.SubElement(legend, "text", x=str(W - 140), y="44", **{"font-size": "12"})
    t.text = "predicted position"
    return ET.tostring(svg, encoding="unicode") + "\n"


# -- parser ----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--preset", choices=("paper", "desk"), default=None)
    common.add_argument("--config", default=None, help="JSON file with 'model', 'train' and sweep keys")
    common.add_argument("--out", default=None, help=f"output path (default: under ${OUT_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eegmtl", description="Multi-task EEG gaze transformer tools.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic dataset container")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--no-pupil", action="store_true")
    g.set_defaults(func=cmd_gen)

    def train_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--optimizer", choices=("adam", "sgd"))
        sp.add_argument("--alpha-pupil", type=float)
        sp.add_argument("--l2", type=float)
        sp.add_argument("--no-clip", action="store_true")

    t = sub.add_parser("train", parents=[common], help="train one model and write report + checkpoint")
    train_flags(t)
    t.add_argument("--variant", choices=("mtl1", "mtl2", "base"), default="mtl1")
    t.add_argument("--alpha-recon", type=float)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", parents=[common], help="paired-seed sweep over the reconstruction weight")
    train_flags(s)
    s.add_argument("--weights", type=float, nargs="+")
    s.add_argument("--seeds", type=int, nargs="+")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer and the model")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--layers-only", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    for name, fn, helptext in (("plot", cmd_plot, "scatter CSV/SVG of true vs predicted gaze"),
                               ("eval", cmd_eval, "RMSE of a checkpoint on a split")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
        if name == "plot":
            e.add_argument("--no-svg", action="store_true")
        e.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericAbort, NonFiniteGradient) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
