"""``coastcast`` command line: synth, train, evaluate, predict, inspect, tables.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .models import (
    ARCHITECTURES,
    ModelConfig,
    UnknownModelError,
    build_model,
    count_params,
    forward,
    summarize,
)
from .report import evaluate, pivot_tables, read_eval_csv, write_pgm
from .tensor import BoundsError, ShapeError
from .training import (
    CheckpointFormatError,
    NumericalError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("coastcast")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
PANELS = ("input", "truth", "prediction", "error")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def resolve_split(cfg: dict, series: D.GridSeries) -> D.SplitSpec:
    split = cfg.get("split", {"preset": "scaled"})
    preset = split.get("preset")
    if preset == "table1":
        return D.SplitSpec.table1(split.get("season_hours", 504))
    if preset == "scaled":
        return D.SplitSpec.scaled(series.start_time, series.length, series.step_seconds,
                                  split.get("train_fraction", 0.6))
    if preset is not None:
        raise UsageError(f"unknown split preset {preset!r}")
    return D.SplitSpec.from_dict(split)


def _model_config(cfg: dict, arch: str, series: D.GridSeries, lags: int) -> ModelConfig:
    if arch not in ARCHITECTURES:
        raise UnknownModelError(arch)
    mcfg = dict(cfg.get("model", {}))
    L, H, W, V = series.values.shape
    for key, actual in (("height", H), ("width", W), ("variables", V), ("lags", lags)):
        if key in mcfg and mcfg[key] != actual:
            raise DataError(f"config {key}={mcfg[key]} but the data implies {actual}")
        mcfg[key] = actual
    mcfg["arch"] = arch
    return ModelConfig.from_dict(mcfg)


def _prepared(series: D.GridSeries, crop, scaler: D.ScalerParams | None, train_steps=None):
    if crop:
        series = D.crop_spatial(series, *crop)
    series = D.apply_mask(series)
    if scaler is None:
        scaler = D.fit_scaler(series, train_steps)
    return D.apply_scale(series, scaler), scaler


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    series = D.synth_generate(args.seed, args.length, args.height, args.width)
    out = Path(args.out)
    if out.suffix != ".cten":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "synth.cten"
    D.write_container(series, out)
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.model not in ARCHITECTURES:
        raise UnknownModelError(args.model)
    raw = D.read_container(args.data)
    wcfg = cfg.get("window", {})
    window = D.WindowSpec(wcfg.get("lags", 10), args.horizon or wcfg.get("horizon", 12))
    crop = cfg.get("crop")
    cropped = D.crop_spatial(raw, *crop) if crop else raw
    split = resolve_split(cfg, cropped)
    splits = D.split_by_dates(cropped, split, window)
    series, scaler = _prepared(raw, crop, None, splits.train_steps)
    mconf = _model_config(cfg, args.model, series, window.lags)
    if args.seed is not None:
        mconf.seed = args.seed
    tconf = TrainConfig.from_dict(cfg.get("train", {}))
    if args.seed is not None:
        tconf.seed = args.seed
    stride = int(cfg.get("train_stride", 1))
    train_ds = D.WindowDataset(series, splits.train[::stride], window)
    val_ds = D.WindowDataset(series, splits.all_val(), window)
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise DataError("training or validation split has no complete windows")
    extra = {"scaler": scaler.to_dict(), "window": {"lags": window.lags, "horizon": window.horizon},
             "split": split.to_dict(), "crop": crop, "variables": series.variable_names}
    model = build_model(mconf)
    result = train(model, train_ds, val_ds, tconf, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best, out / "best.ckpt")
    (out / "history.csv").write_text(result.history_csv())
    log.info("best epoch %d val_mse %.6g", result.best.epoch, result.best.val_loss)
    return 0


def _load_for_inference(args):
    ckpt = load_checkpoint(args.checkpoint)
    raw = D.read_container(args.data)
    extra = ckpt.extra
    scaler = D.ScalerParams.from_dict(extra["scaler"])
    crop = extra.get("crop")
    series, _ = _prepared(raw, crop, scaler)
    c = ckpt.config
    if series.values.shape[1:] != (c.height, c.width, c.variables):
        raise DataError(f"checkpoint expects grid {(c.height, c.width, c.variables)}, "
                        f"data has {series.values.shape[1:]}")
    window = D.WindowSpec(**extra["window"])
    return ckpt, raw, series, scaler, window


def cmd_evaluate(args) -> int:
    ckpt, _, series, _, window = _load_for_inference(args)
    cfg = load_config(args.config)
    split = resolve_split(cfg, series) if "split" in cfg else D.SplitSpec.from_dict(ckpt.extra["split"])
    splits = D.split_by_dates(series, split, window)
    model = ckpt.to_model()
    report = evaluate(model, series, splits.test, window, ckpt.config.arch)
    text = report.to_csv(sea_column=args.sea_pixels)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    ckpt, raw, series, scaler, window = _load_for_inference(args)
    target = series.step_of(args.timestamp)
    start = target - window.lags + 1 - window.horizon
    if start < 0 or target >= series.length:
        raise DataError(f"{args.timestamp} has no complete input window in the data")
    model = ckpt.to_model()
    x = series.values[start:start + window.lags][None]
    pred_scaled = forward(model, x, "eval")[0]  # (1,H,W,V)
    pred = D.inverse_scale_array(pred_scaled, scaler, series.sea).astype(np.float32)
    physical = raw
    if ckpt.extra.get("crop"):
        physical = D.crop_spatial(raw, *ckpt.extra["crop"])
    physical = D.apply_mask(physical)
    panels = {
        "input": physical.values[target - window.horizon],
        "truth": physical.values[target],
        "prediction": pred[0],
    }
    panels["error"] = np.abs(panels["prediction"] - panels["truth"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "prediction.npy", pred)
    np.savez(out / "panels.npz", **panels)
    for j, var in enumerate(series.variable_names):
        for panel in PANELS:
            write_pgm(out / f"{var}_{panel}.pgm", panels[panel][..., j])
    print(out)
    return 0


def inspect_rows(cfg: dict) -> list[list]:
    base = None
    rows = []
    for arch in ARCHITECTURES:
        table = count_params(build_model(ModelConfig.from_dict({**cfg.get("model", {}), "arch": arch})))
        base = base or table.total
        rows.append([arch, table.total, table.conv_layers, f"{table.total / base:.4f}"])
    return rows


def cmd_inspect(args) -> int:
    cfg = load_config(args.config)
    if args.model == "all":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "total_params", "conv_layers", "ratio_to_3ddr_unet"])
        w.writerows(inspect_rows(cfg))
        text = buf.getvalue()
    else:
        if args.model not in ARCHITECTURES:
            raise UnknownModelError(args.model)
        model = build_model(ModelConfig.from_dict({**cfg.get("model", {}), "arch": args.model}))
        text = summarize(model, "csv")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "inspect.csv").write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_tables(args) -> int:
    rows = []
    for path in args.reports:
        rows += read_eval_csv(Path(path).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in pivot_tables(rows).items():
        (out / f"{name}.csv").write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coastcast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic coastal series container")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--length", type=int, default=2000)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--out", required=True, help="output .cten file or directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one architecture")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--model", required=True)
    t.add_argument("--horizon", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="seasonal test MSE report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="optional config whose 'split' overrides the checkpoint's")
    e.add_argument("--sea-pixels", action="store_true", help="add a sea-pixels-only MSE column")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("predict", help="dump one forecast as PGM panels")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--timestamp", required=True, help="forecast target time (ISO-8601)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    i = sub.add_parser("inspect", help="layer summary or parameter comparison")
    i.add_argument("--model", default="all", help="architecture name or 'all'")
    i.add_argument("--config")
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)

    tb = sub.add_parser("tables", help="pivot evaluate CSVs into result tables")
    tb.add_argument("reports", nargs="+")
    tb.add_argument("--out", required=True)
    tb.set_defaults(func=cmd_tables)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, UnknownModelError) as exc:
        print(f"coastcast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"coastcast: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, D.ContainerFormatError, D.DataRangeError, CheckpointFormatError,
            ShapeError, BoundsError, OSError, ValueError, KeyError) as exc:
        print(f"coastcast: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
