"""Gridded sea-element series: container files, preprocessing, windowing,
seasonal date splits, and a synthetic coastal field generator."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .tensor import BoundsError, tensor_crop

SEASONS = ("spring", "summer", "autumn", "winter")
VARIABLES = ("EastCUR", "NorthCUR", "SAL", "SSH")
SCALE_LOW = 0.1
SCALE_HIGH = 1.0


class ContainerFormatError(ValueError):
    pass


class DataRangeError(ValueError):
    """A requested time range or window does not fit the series."""


def parse_time(value) -> datetime:
    if isinstance(value, datetime):
        dt = value
    else:
        text = str(value).strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        try:
            dt = datetime.fromisoformat(text)
        except ValueError:
            dt = datetime.strptime(text, "%d/%m/%Y")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_time(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class GridSeries:
    values: np.ndarray  # (L, H, W, V) float32
    start_time: datetime
    step_seconds: int
    variable_names: list[str]
    mask: np.ndarray  # (H, W) uint8, 1 = sea

    def __post_init__(self):
        self.start_time = parse_time(self.start_time)
        self.variable_names = list(self.variable_names)
        if self.values.ndim != 4:
            raise ValueError(f"values must be (L,H,W,V), got {self.values.shape}")
        L, H, W, V = self.values.shape
        if L < 1:
            raise ValueError("series needs at least one timestep")
        if len(self.variable_names) != V:
            raise ValueError(f"{len(self.variable_names)} variable names for {V} variables")
        if self.mask.shape != (H, W):
            raise ValueError(f"mask {self.mask.shape} does not match grid {(H, W)}")
        if self.step_seconds < 1:
            raise ValueError("step_seconds must be positive")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def sea(self) -> np.ndarray:
        return self.mask.astype(bool)

    def time_at(self, step: int) -> datetime:
        return self.start_time + timedelta(seconds=self.step_seconds * step)

    def step_of(self, when) -> int:
        """Step index of a timestamp; it must sit exactly on the step grid."""
        delta = (parse_time(when) - self.start_time).total_seconds()
        step, rem = divmod(delta, self.step_seconds)
        if rem:
            raise DataRangeError(f"{when} is not on the {self.step_seconds}s step grid")
        return int(step)

    def land_is_zero(self) -> bool:
        return bool(np.all(self.values[:, ~self.sea, :] == 0))


# -- container I/O -----------------------------------------------------------

MAGIC = b"CTEN"
VERSION = 1
_HEAD = struct.Struct("<4sIB4QI")


def write_container(series: GridSeries, path) -> None:
    """Little-endian: magic, u32 version, u8 dtype (0 = f32), u64 x4 dims,
    u32-prefixed JSON metadata, H*W mask bytes, then the f32 payload."""
    meta = json.dumps({
        "start_time": format_time(series.start_time),
        "step_seconds": int(series.step_seconds),
        "variables": series.variable_names,
    }, sort_keys=True).encode("utf-8")
    L, H, W, V = series.values.shape
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, 0, L, H, W, V, len(meta)))
        fh.write(meta)
        fh.write((series.mask != 0).astype(np.uint8).tobytes())
        fh.write(np.ascontiguousarray(series.values, dtype="<f4").tobytes())


def read_container(path) -> GridSeries:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise ContainerFormatError("file shorter than the container header")
    magic, version, dtype, L, H, W, V, mlen = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise ContainerFormatError("bad magic: not a container file")
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    if dtype != 0:
        raise ContainerFormatError(f"unsupported dtype code {dtype}")
    if min(L, H, W, V) < 1:
        raise ContainerFormatError(f"zero extent in dims {(L, H, W, V)}")
    n_mask = H * W
    n_vals = L * H * W * V
    if n_vals > (1 << 62) // 4:
        raise ContainerFormatError(f"dimension overflow: {(L, H, W, V)}")
    expected = _HEAD.size + mlen + n_mask + 4 * n_vals
    if len(data) != expected:
        raise ContainerFormatError(
            f"payload length mismatch: file has {len(data)} bytes, header implies {expected}")
    pos = _HEAD.size
    meta = json.loads(data[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    mask = np.frombuffer(data, np.uint8, n_mask, pos).reshape(H, W).copy()
    pos += n_mask
    values = np.frombuffer(data, "<f4", n_vals, pos).astype(np.float32).reshape(L, H, W, V)
    return GridSeries(values, parse_time(meta["start_time"]), int(meta["step_seconds"]),
                      meta["variables"], mask)


# -- preprocessing -----------------------------------------------------------

@dataclass
class ScalerParams:
    x_min: np.ndarray  # (V,)
    x_max: np.ndarray

    def to_dict(self) -> dict:
        return {"x_min": [float(v) for v in self.x_min], "x_max": [float(v) for v in self.x_max]}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(np.asarray(d["x_min"], np.float64), np.asarray(d["x_max"], np.float64))


def fit_scaler(series: GridSeries, train_range: tuple[int, int]) -> ScalerParams:
    """Per-variable min/max over sea pixels of steps ``[lo, hi)`` only."""
    lo, hi = train_range
    if not 0 <= lo < hi <= series.length:
        raise DataRangeError(f"training range [{lo}, {hi}) outside series of {series.length}")
    sea_vals = series.values[lo:hi][:, series.sea, :]
    if sea_vals.size == 0:
        raise DataRangeError("no sea pixels to fit the scaler on")
    x_min = sea_vals.min(axis=(0, 1)).astype(np.float64)
    x_max = sea_vals.max(axis=(0, 1)).astype(np.float64)
    flat = np.flatnonzero(x_max <= x_min)
    if flat.size:
        names = [series.variable_names[i] for i in flat]
        raise ValueError(f"degenerate range (constant variable): {names}")
    return ScalerParams(x_min, x_max)


def apply_scale(series: GridSeries, params: ScalerParams) -> GridSeries:
    """MinMax scaling of sea pixels into [0.1, 1]; land pixels become 0.
    Values outside the fitted range are not clamped."""
    x = series.values.astype(np.float64)
    span = params.x_max - params.x_min
    scaled = SCALE_LOW + (x - params.x_min) * (SCALE_HIGH - SCALE_LOW) / span
    scaled[:, ~series.sea, :] = 0.0
    return replace(series, values=scaled.astype(np.float32))


def inverse_scale(series: GridSeries, params: ScalerParams) -> GridSeries:
    values = inverse_scale_array(series.values, params, series.sea)
    return replace(series, values=values.astype(np.float32))


def inverse_scale_array(values: np.ndarray, params: ScalerParams, sea: np.ndarray) -> np.ndarray:
    """Map scaled ``(..., H, W, V)`` values back to physical units in float64;
    land stays 0."""
    x = values.astype(np.float64)
    span = params.x_max - params.x_min
    out = params.x_min + (x - SCALE_LOW) * span / (SCALE_HIGH - SCALE_LOW)
    out[..., ~sea, :] = 0.0
    return out


def apply_mask(series: GridSeries) -> GridSeries:
    values = series.values.copy()
    values[:, ~series.sea, :] = 0.0
    return replace(series, values=values)


def crop_spatial(series: GridSeries, target_h: int, target_w: int) -> GridSeries:
    """Keep rows ``[0, target_h)`` and columns ``[0, target_w)``."""
    _, H, W, _ = series.values.shape
    if target_h > H or target_w > W:
        raise BoundsError(f"cannot crop {H}x{W} to {target_h}x{target_w}")
    values = tensor_crop(series.values, [None, (0, target_h), (0, target_w)])
    mask = tensor_crop(series.mask, [(0, target_h), (0, target_w)])
    return replace(series, values=values, mask=mask)


def preprocess(series: GridSeries, train_range: tuple[int, int],
               crop: tuple[int, int] | None = None) -> tuple[GridSeries, ScalerParams]:
    """crop -> mask land -> fit scaler on the training steps -> scale."""
    if crop is not None:
        series = crop_spatial(series, *crop)
    series = apply_mask(series)
    params = fit_scaler(series, train_range)
    return apply_scale(series, params), params


# -- windows and splits ------------------------------------------------------

@dataclass(frozen=True)
class WindowSpec:
    lags: int = 10
    horizon: int = 12

    def __post_init__(self):
        if self.lags < 1 or self.horizon < 1:
            raise ValueError("lags and horizon must be >= 1")

    @property
    def span(self) -> int:
        """Steps covered by one sample, first input through target."""
        return self.lags + self.horizon

    def target_step(self, start: int) -> int:
        return start + self.lags - 1 + self.horizon


def make_windows(length: int, spec: WindowSpec) -> np.ndarray:
    """Start indices of every sample: inputs ``[i, i+d)``, target ``i+d-1+h``."""
    if isinstance(length, GridSeries):
        length = length.length
    count = length - spec.lags - spec.horizon + 1
    if count < 1:
        raise DataRangeError(
            f"series of {length} steps too short for {spec.lags} lags + horizon {spec.horizon}")
    return np.arange(count)


Range = tuple[datetime, datetime]


@dataclass
class SplitSpec:
    train: Range
    val: dict[str, Range]
    test: dict[str, Range]

    def __post_init__(self):
        self.train = tuple(parse_time(t) for t in self.train)
        self.val = {k: tuple(parse_time(t) for t in v) for k, v in self.val.items()}
        self.test = {k: tuple(parse_time(t) for t in v) for k, v in self.test.items()}
        ranges = [self.train, *self.val.values(), *self.test.values()]
        for a, b in ranges:
            if b <= a:
                raise ValueError(f"empty range {a} -> {b}")
        ordered = sorted(ranges)
        for (a0, b0), (a1, b1) in zip(ordered, ordered[1:]):
            if a1 < b0:
                raise ValueError(f"split ranges overlap: {a0}-{b0} and {a1}-{b1}")

    @classmethod
    def table1(cls, season_hours: int = 504) -> "SplitSpec":
        """The published seasonal protocol: one training year, then per season a
        validation block followed by a test block, each ``season_hours`` long
        from its listed start date."""
        h = timedelta(hours=season_hours)
        val_from = {"spring": "01/04/2018", "summer": "01/07/2018",
                    "autumn": "01/10/2018", "winter": "01/01/2019"}
        test_from = {"spring": "23/04/2018", "summer": "23/07/2018",
                     "autumn": "23/10/2018", "winter": "23/01/2019"}
        val = {s: (parse_time(d), parse_time(d) + h) for s, d in val_from.items()}
        test = {s: (parse_time(d), parse_time(d) + h) for s, d in test_from.items()}
        return cls((parse_time("01/03/2017"), parse_time("01/03/2018")), val, test)

    @classmethod
    def scaled(cls, series_start, length: int, step_seconds: int = 3600,
               train_fraction: float = 0.6) -> "SplitSpec":
        """A desk-scale analogue of the seasonal protocol: the first
        ``train_fraction`` of the steps train, the rest is cut into four
        consecutive season blocks, each halved into validation then test."""
        start = parse_time(series_start)
        n_train = int(length * train_fraction)
        block = (length - n_train) // 4
        half = block // 2
        if half < 1:
            raise DataRangeError("series too short for a scaled seasonal split")

        def at(step):
            return start + timedelta(seconds=step_seconds * step)
        val, test = {}, {}
        for k, season in enumerate(SEASONS):
            b0 = n_train + k * block
            val[season] = (at(b0), at(b0 + half))
            test[season] = (at(b0 + half), at(b0 + 2 * half))
        return cls((at(0), at(n_train)), val, test)

    def to_dict(self) -> dict:
        def r(pair):
            return [format_time(pair[0]), format_time(pair[1])]
        return {"train": r(self.train),
                "val": {k: r(v) for k, v in self.val.items()},
                "test": {k: r(v) for k, v in self.test.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(tuple(d["train"]), {k: tuple(v) for k, v in d["val"].items()},
                   {k: tuple(v) for k, v in d["test"].items()})


def range_steps(series: GridSeries, rng: Range) -> tuple[int, int]:
    """Resolve a ``[from, to)`` time range into step indices ``[lo, hi)``."""
    lo, hi = series.step_of(rng[0]), series.step_of(rng[1])
    if lo < 0 or hi > series.length or lo >= hi:
        raise DataRangeError(
            f"range {format_time(rng[0])} .. {format_time(rng[1])} lies outside the series "
            f"({format_time(series.start_time)} .. {format_time(series.time_at(series.length))})")
    return lo, hi


def windows_in(lo: int, hi: int, spec: WindowSpec) -> np.ndarray:
    """Sample starts whose inputs and target all fall inside ``[lo, hi)``."""
    return np.arange(lo, max(lo, hi - spec.span + 1))


@dataclass
class Splits:
    train: np.ndarray
    val: dict[str, np.ndarray] = field(default_factory=dict)
    test: dict[str, np.ndarray] = field(default_factory=dict)
    train_steps: tuple[int, int] = (0, 0)

    def all_val(self) -> np.ndarray:
        return np.concatenate(list(self.val.values())) if self.val else np.array([], int)

    def all_test(self) -> np.ndarray:
        return np.concatenate(list(self.test.values())) if self.test else np.array([], int)


def split_by_dates(series: GridSeries, spec: SplitSpec, window: WindowSpec) -> Splits:
    """Sample start indices per split; windows straddling a boundary are dropped."""
    tr = range_steps(series, spec.train)
    return Splits(
        train=windows_in(*tr, window),
        val={s: windows_in(*range_steps(series, r), window) for s, r in spec.val.items()},
        test={s: windows_in(*range_steps(series, r), window) for s, r in spec.test.items()},
        train_steps=tr,
    )


@dataclass
class WindowDataset:
    """Samples of a (scaled) series addressed by their start index."""

    series: GridSeries
    starts: np.ndarray
    window: WindowSpec

    def __len__(self):
        return len(self.starts)

    def batch(self, indices):
        starts = self.starts[np.asarray(indices)]
        d, vals = self.window.lags, self.series.values
        x = np.stack([vals[s:s + d] for s in starts])
        y = np.stack([vals[self.window.target_step(s)][None] for s in starts])
        return x, y


# -- synthetic data ----------------------------------------------------------

def _ar1(rng: np.random.Generator, n: int, phi: float) -> np.ndarray:
    """Unit-variance AR(1) sequence."""
    noise = rng.standard_normal(n) * np.sqrt(1 - phi * phi)
    out = np.empty(n)
    out[0] = rng.standard_normal()
    for i in range(1, n):
        out[i] = phi * out[i - 1] + noise[i]
    return out


def land_mask(H: int, W: int) -> np.ndarray:
    """Fixed rectangular land region in the lower-right corner; 1 = sea."""
    mask = np.ones((H, W), np.uint8)
    mask[int(0.65 * H):, int(0.7 * W):] = 0
    return mask


def synth_generate(seed: int, L: int, H: int, W: int,
                   start_time="2017-03-01T00:00:00Z", step_seconds: int = 3600) -> GridSeries:
    """Deterministic stand-in for the four hourly sea elements.

    Velocities come from a drifting eddy whose strength follows a slow AR(1)
    process plus a semidiurnal tidal current; salinity is a smooth pattern
    advected by a constant drift with AR(1) amplitude changes; surface height
    is a diurnal + semidiurnal tide on top of a slowly varying surge.
    """
    if min(L, H, W) < 8:
        raise ValueError("synthetic series needs L, H, W >= 8")
    rng = np.random.default_rng(seed)
    hours = np.arange(L, dtype=np.float64) * step_seconds / 3600.0
    yy, xx = np.meshgrid(np.linspace(0, 1, H, endpoint=False),
                         np.linspace(0, 1, W, endpoint=False), indexing="ij")
    t = hours[:, None, None]

    # velocities
    cx, cy = rng.uniform(0.3, 0.5, 2)
    width = 0.18
    strength = 0.5 * (1.0 + 0.4 * _ar1(rng, L, 0.95))[:, None, None]
    drift = rng.uniform(-0.1, 0.1, 2)
    tide_phase = rng.uniform(0, 2 * np.pi)
    tidal = 0.25 * np.sin(2 * np.pi * t / 12.42 + tide_phase + 2.0 * xx)
    ex = xx[None] - cx - 0.05 * np.sin(2 * np.pi * t / 240.0)
    ey = yy[None] - cy
    bump = np.exp(-(ex ** 2 + ey ** 2) / (2 * width ** 2))
    east = -strength * ey / width * bump + drift[0] + tidal
    north = strength * ex / width * bump + drift[1] + 0.5 * tidal

    # salinity: pattern advected with a constant drift (grid units per hour)
    adv = rng.uniform(0.002, 0.006, 2)
    k1, k2 = rng.integers(1, 3, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    amp = (1.0 + 0.3 * _ar1(rng, L, 0.97))[:, None, None]
    px = 2 * np.pi * (xx[None] - adv[0] * t)
    py = 2 * np.pi * (yy[None] - adv[1] * t)
    sal = 34.0 - 1.5 * xx[None] + amp * 0.8 * np.sin(k1 * px + phase[0]) * np.cos(k2 * py + phase[1])

    # surface height
    surge = 0.4 * _ar1(rng, L, 0.98)[:, None, None]
    ph = rng.uniform(0, 2 * np.pi, 2)
    ssh = (0.8 * np.sin(2 * np.pi * t / 23.93 + ph[0] + 1.5 * xx[None])
           + 0.4 * np.sin(2 * np.pi * t / 12.42 + ph[1] + 1.0 * yy[None])
           + surge * (1.0 + 0.5 * xx[None]))

    values = np.stack([east, north, sal, ssh], axis=-1).astype(np.float32)
    mask = land_mask(H, W)
    values[:, mask == 0, :] = 0.0
    return GridSeries(values, parse_time(start_time), step_seconds, list(VARIABLES), mask)


def lag1_autocorrelation(values: np.ndarray, sea: np.ndarray) -> float:
    """Mean over sea pixels of the Pearson correlation between steps t and t+1."""
    x = values[:, sea]  # (L, n_sea)
    a, b = x[:-1] - x[:-1].mean(0), x[1:] - x[1:].mean(0)
    r = (a * b).sum(0) / np.sqrt((a * a).sum(0) * (b * b).sum(0))
    return float(np.mean(r))
