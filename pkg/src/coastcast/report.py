"""Seasonal MSE reports, table pivots and grayscale image dumps."""
from __future__ import annotations

import csv
import io
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SEASONS, WindowDataset
from .models import ModelGraph, forward
from .training import iter_batches

ALL = "ALL"


@dataclass
class EvalRow:
    model: str
    season: str
    horizon_h: float
    variable: str
    mse: float
    mse_sea: float | None = None
    samples: int = 0


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def get(self, season: str, variable: str = ALL) -> EvalRow:
        for r in self.rows:
            if r.season == season and r.variable == variable:
                return r
        raise KeyError((season, variable))

    def to_csv(self, sea_column: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["model", "season", "horizon_h", "variable", "mse"]
        if sea_column:
            head.append("mse_sea_pixels_only")
        w.writerow(head)
        for r in self.rows:
            row = [r.model, r.season, _fmt_num(r.horizon_h), r.variable, f"{r.mse:.10e}"]
            if sea_column:
                row.append(f"{r.mse_sea:.10e}")
            w.writerow(row)
        return buf.getvalue()


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def per_sample_errors(model: ModelGraph, dataset: WindowDataset, sea: np.ndarray,
                      batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample, per-variable MSE over all pixels and over sea pixels only."""
    n, v = len(dataset), model.config.variables
    full = np.zeros((n, v))
    sea_only = np.zeros((n, v))
    for idx in iter_batches(n, batch_size):
        x, y = dataset.batch(idx)
        pred = forward(model, x, "eval")
        sq = (pred.astype(np.float64) - y) ** 2  # (B,1,H,W,V)
        full[idx] = sq.mean(axis=(1, 2, 3))
        sea_only[idx] = sq[:, 0][:, sea, :].mean(axis=1)
    return full, sea_only


def evaluate(model: ModelGraph, series, season_starts: dict[str, np.ndarray], window,
             model_name: str, batch_size: int = 16) -> EvalReport:
    """Per-season and all-season MSE rows, per variable and combined.

    MSE is taken over scaled values and all pixels, matching the training loss.
    """
    if not season_starts or any(len(s) == 0 for s in season_starts.values()):
        empty = [k for k, s in season_starts.items() if len(s) == 0] or ["<all>"]
        raise ValueError(f"evaluation split has no samples: {empty}")
    hours = window.horizon * series.step_seconds / 3600.0
    names = series.variable_names
    report = EvalReport()
    fulls, seas = [], []

    def add_rows(season, full, sea_only):
        for j, var in enumerate(names):
            report.rows.append(EvalRow(model_name, season, hours, var, float(full[:, j].mean()),
                                       float(sea_only[:, j].mean()), len(full)))
        report.rows.append(EvalRow(model_name, season, hours, ALL, float(full.mean()),
                                   float(sea_only.mean()), len(full)))

    for season, starts in season_starts.items():
        ds = WindowDataset(series, np.asarray(starts), window)
        full, sea_only = per_sample_errors(model, ds, series.sea, batch_size)
        add_rows(season, full, sea_only)
        fulls.append(full)
        seas.append(sea_only)
    add_rows(ALL, np.concatenate(fulls), np.concatenate(seas))
    return report


def read_eval_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def pivot_tables(rows: list[dict]) -> dict[str, str]:
    """Lay evaluation rows out like the published result tables.

    ``all_seasons``: model x horizon (season ALL, variable ALL).
    ``by_season``: season, model x horizon (variable ALL).
    ``by_variable``: model, variable x horizon (season ALL).
    """
    horizons = sorted({float(r["horizon_h"]) for r in rows})
    models = list(dict.fromkeys(r["model"] for r in rows))
    seasons = [s for s in SEASONS if any(r["season"] == s for r in rows)]
    variables = list(dict.fromkeys(r["variable"] for r in rows if r["variable"] != ALL))
    cell = defaultdict(lambda: "")
    for r in rows:
        cell[(r["model"], r["season"], r["variable"], float(r["horizon_h"]))] = \
            f"{float(r['mse']):.2e}"
    hcols = [f"{_fmt_num(h)}h" for h in horizons]

    def render(header, body):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        return buf.getvalue()

    all_seasons = render(["model", *hcols],
                         [[m, *[cell[(m, ALL, ALL, h)] for h in horizons]] for m in models])
    by_season = render(["season", "model", *hcols],
                       [[s, m, *[cell[(m, s, ALL, h)] for h in horizons]]
                        for s in seasons for m in models])
    by_variable = render(["model", "variable", *hcols],
                         [[m, v, *[cell[(m, ALL, v, h)] for h in horizons]]
                          for m in models for v in variables])
    return {"all_seasons": all_seasons, "by_season": by_season, "by_variable": by_variable}


# -- grayscale dumps ---------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> dict:
    """Write a 2D array as 8-bit binary PGM normalised by its own min/max;
    the normalisation goes to a ``.json`` sidecar, whose content is returned."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM dumps take 2D arrays")
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    q = np.zeros(img.shape, np.uint8) if span == 0 else np.rint((img - lo) / span * 255).astype(np.uint8)
    path = Path(path)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())
    meta = {"min": lo, "max": hi}
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return meta


def read_pgm(path) -> np.ndarray:
    """Read a dump written by :func:`write_pgm` back into physical values."""
    path = Path(path)
    data = path.read_bytes()
    head = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if head is None:
        raise ValueError("not a binary PGM file")
    w, h, maxval = (int(g) for g in head.groups())
    pixels = np.frombuffer(data, np.uint8, w * h, head.end()).reshape(h, w)
    meta = json.loads(path.with_suffix(".json").read_text())
    return meta["min"] + pixels.astype(np.float64) / maxval * (meta["max"] - meta["min"])
