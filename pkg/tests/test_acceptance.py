"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected in ``RESULTS`` and echoed in pytest's terminal
summary (see conftest.py), so they show up without ``-s``.
"""
import time

import numpy as np
import pytest

from coastcast import data as D
from coastcast import tensor as T
from coastcast.blocks import Context, TimeReducer, asymm_conv_chain
from coastcast.layers import (
    BatchNormState,
    ConvSpec,
    DropoutSpec,
    LayerParams,
    batchnorm,
    conv3d_raw,
    dropout,
    maxpool,
    time_reduce_conv,
    upsample_nearest,
)
from coastcast.models import ARCHITECTURES, ModelConfig, build_model, count_params, forward
from coastcast.training import (
    Checkpoint,
    TrainConfig,
    evaluate_mse,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    train,
)
from oracles import conv3d_reference, enumerate_windows, gradcheck
from test_blocks import BLOCKS, block_gradcheck

RESULTS: dict[int, str] = {}
ARCHS = list(ARCHITECTURES)


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2} {title:<34} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    assert ok, line


def worst_relative(worst: dict) -> tuple[float, float]:
    return (max(r for r, _ in worst.values()), max(a for _, a in worst.values()))


# 1 ---------------------------------------------------------------------------

def test_c01_convolution_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    err64 = err32 = 0.0
    cases = 0
    for i in range(120):
        t, h, w = rng.integers(1, 5), rng.integers(1, 8), rng.integers(1, 8)
        cin, cout = rng.integers(1, 4), rng.integers(1, 5)
        padding = "same" if i % 2 == 0 else "valid"
        hi = (t, h, w) if padding == "valid" else (3, 3, 3)
        kernel = tuple(int(rng.integers(1, min(3, e) + 1)) for e in hi)
        x = rng.uniform(-1, 1, (t, h, w, cin))
        wt = rng.uniform(-1, 1, (*kernel, cin, cout))
        b = rng.uniform(-1, 1, cout)
        ref = conv3d_reference(x, wt, b, padding)
        err64 = max(err64, np.abs(conv3d_raw(x, wt, b, padding) - ref).max())
        got32 = conv3d_raw(x.astype(np.float32), wt.astype(np.float32), b.astype(np.float32), padding)
        assert got32.dtype == np.float32
        err32 = max(err32, np.abs(got32 - ref).max())
        cases += 1
    dt = time.perf_counter() - t0
    record(1, "convolution oracle", err64 <= 1e-12 and err32 <= 1e-5 and dt < 60,
           f"{cases} cases, max err f64 {err64:.1e} (<=1e-12), f32 {err32:.1e} (<=1e-5), {dt:.1f}s")


# 2 ---------------------------------------------------------------------------

def _layer_checks(rng):
    x5 = rng.uniform(-1, 1, (2, 3, 4, 4, 2))
    checks = {}
    for padding in ("same", "valid"):
        w = rng.uniform(-1, 1, (3, 3, 2, 2, 3))
        b = rng.uniform(-1, 1, 3)
        r = rng.uniform(-1, 1, conv3d_raw(x5, w, b, padding).shape)
        checks[f"conv3d/{padding}"] = gradcheck(
            lambda x, w, b, r=r, p=padding: T.total(conv3d_raw(x, w, b, p) * r),
            {"x": x5, "w": w, "b": b})
    wt = rng.uniform(-1, 1, (3, 1, 1, 2, 2))
    bt = rng.uniform(-1, 1, 2)
    rt = rng.uniform(-1, 1, (2, 1, 4, 4, 2))
    checks["time_reduce"] = gradcheck(
        lambda x, w, b: T.total(time_reduce_conv(x, LayerParams(w, b)) * rt),
        {"x": x5, "w": wt, "b": bt})
    rp = rng.uniform(-1, 1, (2, 3, 2, 2, 2))
    checks["maxpool"] = gradcheck(lambda x: T.total(maxpool(x) * rp), {"x": x5}, max_coords=None)
    ru = rng.uniform(-1, 1, (2, 3, 8, 8, 2))
    checks["upsample"] = gradcheck(lambda x: T.total(upsample_nearest(x) * ru), {"x": x5})
    rr = rng.uniform(-1, 1, x5.shape)
    checks["relu"] = gradcheck(lambda x: T.total(T.relu(x) * rr), {"x": x5})
    checks["concat"] = gradcheck(
        lambda a, b: T.total(T.concat([a, b], axis=-1) * np.concatenate([rr, rr], -1)),
        {"a": x5, "b": x5 * 0.5})
    checks["crop"] = gradcheck(lambda x: T.total(T.crop(x, [None, (1, 3)]) * rr[:, 1:3]), {"x": x5})
    g = rng.uniform(0.5, 1.5, 2)
    bb = rng.uniform(-1, 1, 2)
    for mode in ("train", "eval"):
        def f(x, g, b, mode=mode):
            state = BatchNormState(np.array([0.1, -0.2]), np.array([1.5, 0.7]))
            return T.total(batchnorm(x, g, b, state, mode) * rr)
        checks[f"batchnorm/{mode}"] = gradcheck(f, {"x": x5, "g": g, "b": bb})
    checks["dropout"] = gradcheck(
        lambda x: T.total(dropout(x, DropoutSpec(0.5, seed=4), "train") * rr), {"x": x5})
    tgt = rng.uniform(0, 1, x5.shape)
    checks["mse_loss"] = gradcheck(lambda p: mse_loss(p, tgt), {"p": x5})
    return checks


def test_c02_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    checks = _layer_checks(rng)
    for cls in BLOCKS:
        checks[cls.kind] = block_gradcheck(cls, rng, cout=3)
    tr = TimeReducer("tr", 2, 2)
    tp, _ = tr.init(rng, np.float64)
    r = rng.uniform(-1, 1, (1, 5, 5, 2))

    def f(x, **p):
        ctx = Context(p, {}, "train", getattr(x, "tape", None))
        if ctx.tape is not None:
            ctx.leaves = dict(p)
        return T.total(tr(ctx, x) * r)
    checks["time_reducer_block"] = gradcheck(f, {"x": rng.uniform(-1, 1, (2, 5, 5, 2)), **tp})
    bad = {k: worst_relative({0: v}) for k, v in checks.items()
           if not all(rel < 1e-4 and ab < 1e-7 for rel, ab in v.values())}
    rel, ab = worst_relative({k: worst_relative(v) for k, v in checks.items()})
    dt = time.perf_counter() - t0
    record(2, "gradient suite", not bad and dt < 300,
           f"{len(checks)} layer/block checks, worst rel {rel:.1e} (<1e-4), worst abs on "
           f"tiny grads {ab:.1e}, {dt:.1f}s" + (f", failing {sorted(bad)}" if bad else ""))


# 3 ---------------------------------------------------------------------------

def test_c03_separable_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    err = 0.0
    for _ in range(20):
        a, b, c = rng.standard_normal((3, 3))
        full = np.einsum("p,q,r->pqr", a, b, c)[..., None, None]
        x = rng.standard_normal((int(rng.integers(3, 7)), int(rng.integers(3, 8)),
                                 int(rng.integers(3, 8)), 1))
        chain = [LayerParams(a.reshape(3, 1, 1, 1, 1)), LayerParams(b.reshape(1, 3, 1, 1, 1)),
                 LayerParams(c.reshape(1, 1, 3, 1, 1))]
        err = max(err, np.abs(asymm_conv_chain(x, 3, chain) - conv3d_raw(x, full)).max())
    dt = time.perf_counter() - t0
    record(3, "separable-kernel equivalence", err <= 1e-6 and dt < 10,
           f"20 rank-1 kernels, max err {err:.1e} (<=1e-6), {dt:.2f}s")


# 4 ---------------------------------------------------------------------------

def test_c04_shape_contract():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    seen = []
    ok = True
    for n, hw in ((16, 128), (4, 32)):
        x = rng.uniform(0, 1, (2, 10, hw, hw, 4)).astype(np.float32)
        for arch in ARCHS:
            y = forward(build_model(ModelConfig(arch=arch, base_filters=n, height=hw, width=hw)), x)
            good = y.shape == (2, 1, hw, hw, 4) and bool(np.all(np.isfinite(y)))
            ok &= good
            seen.append(f"{arch}@{hw}:{'ok' if good else y.shape}")
    dt = time.perf_counter() - t0
    record(4, "shape contract", ok and dt < 120,
           f"8 model/config pairs -> (B,1,H,W,V) finite, {dt:.1f}s")


# 5 ---------------------------------------------------------------------------

PROBE_EPOCHS = 500
PROBE_CONFIG = dict(learning_rate=1e-3, seed=0)
# The plain net has the fewest parameters per level and needs the extra updates.
PROBE_BATCH = {"3ddr-unet": 1}
PROBE_HISTORIES: dict[str, list] = {}


def probe_config(arch, epochs):
    return TrainConfig(epochs=epochs, batch_size=PROBE_BATCH.get(arch, 2), **PROBE_CONFIG)


def probe_setup(arch):
    series, _ = D.preprocess(D.synth_generate(0, 64, 32, 32), (0, 64))
    ds = D.WindowDataset(series, np.arange(8), D.WindowSpec(10, 1))
    return build_model(ModelConfig(arch=arch, base_filters=4, height=32, width=32)), ds


@pytest.mark.slow
def test_c05_overfit_probe():
    lines, ok = [], True
    for arch in ARCHS:
        # determinism: two short runs from the same seed agree exactly
        short = []
        for _ in range(2):
            model, ds = probe_setup(arch)
            short.append(train(model, ds, ds, probe_config(arch, 3)))
        same = np.array_equal(np.array(short[0].history), np.array(short[1].history)) and all(
            np.array_equal(short[0].best.params[k], short[1].best.params[k])
            for k in short[0].best.params)
        t0 = time.perf_counter()
        model, ds = probe_setup(arch)
        res = train(model, ds, ds, probe_config(arch, PROBE_EPOCHS))
        PROBE_HISTORIES[arch] = res.history
        dt = time.perf_counter() - t0
        final = evaluate_mse(res.best.to_model(), ds)
        good = final < 1e-3 and same and dt < 600
        ok &= good
        lines.append(f"{arch} (batch {probe_config(arch, 1).batch_size}): train MSE {final:.2e} "
                     f"at epoch {res.best.epoch}, "
                     f"{dt:.0f}s, deterministic={same}")
    record(5, "overfit probe", ok, "; ".join(lines))


def window_medians(losses, width=10):
    return [float(np.median(losses[i:i + width])) for i in range(0, len(losses) - width + 1, width)]


@pytest.mark.slow
def test_probe_loss_window_medians_decrease():
    if len(PROBE_HISTORIES) < len(ARCHS):
        pytest.skip("needs the overfit probe histories from test_c05_overfit_probe")
    rises = {}
    for arch, history in PROBE_HISTORIES.items():
        med = window_medians([tr for _, tr, _ in history])
        rises[arch] = [(10 * i + 1, a, b) for i, (a, b) in enumerate(zip(med, med[1:])) if b > a]
    summary = ", ".join(f"{a}: {len(r)} rises" for a, r in rises.items())
    print(f"probe training-loss 10-epoch medians: {summary}")
    assert not any(rises.values()), rises


# 6 ---------------------------------------------------------------------------

def test_c06_parameter_accounting():
    spot = ConvSpec((3, 3, 3), 4, 16).param_count
    totals, analytic_ok = {}, True
    for arch in ARCHS:
        model = build_model(ModelConfig(arch=arch))
        table = count_params(model)
        totals[arch] = table.total
        analytic_ok &= table.total == sum(v.size for v in model.params.values())
        analytic_ok &= table.total == sum(n for _, n in table.rows)
    ratio = totals["res-3ddr-unet"] / totals["3ddr-unet"]
    mean = np.mean(list(totals.values()))
    spread = {a: t / mean - 1 for a, t in totals.items()}
    ok = spot == 1744 and analytic_ok and 1.4 <= ratio <= 1.6 and all(
        abs(s) <= 0.25 for s in spread.values())
    record(6, "parameter accounting", ok,
           f"spot 3x3x3 4->16 = {spot}; Res/base {ratio:.3f} (1.4-1.6); deviation from mean "
           + ", ".join(f"{a} {s:+.1%}" for a, s in spread.items()) + " (+-25%)")


# 7 ---------------------------------------------------------------------------

def test_c07_preprocessing():
    raw = D.synth_generate(11, 48, 135, 135)
    train_range = (0, 36)
    scaled, params = D.preprocess(raw, train_range, crop=(128, 128))
    sea = scaled.sea
    train_sea = scaled.values[slice(*train_range)][:, sea]
    in_range = train_sea.min() >= 0.1 and train_sea.max() <= 1.0
    land_zero = bool(np.all(scaled.values[:, ~sea, :] == 0))
    back = D.inverse_scale_array(scaled.values, params, sea)
    expected = raw.values[:, :128, :128, :]
    rt = float(np.abs(back - expected)[:, sea].max())
    crop_ok = (scaled.values.shape == (48, 128, 128, 4)
               and np.array_equal(scaled.mask, raw.mask[:128, :128])
               and np.array_equal(D.crop_spatial(raw, 128, 128).values, expected))
    record(7, "preprocessing", in_range and land_zero and rt <= 1e-6 and crop_ok,
           f"train sea range [{train_sea.min():.6f}, {train_sea.max():.6f}], land==0 {land_zero}, "
           f"round trip max err {rt:.1e} (<=1e-6), crop 135->128 ok {crop_ok}")


# 8 ---------------------------------------------------------------------------

def test_c08_split_and_windows():
    spec = D.SplitSpec.table1()
    series = D.GridSeries(np.zeros((24 * 720, 1, 1, 1), np.float32), "01/03/2017", 3600, ["x"],
                          np.ones((1, 1), np.uint8))

    def steps(ranges):
        return sum(hi - lo for lo, hi in (D.range_steps(series, r) for r in ranges))
    val, test = steps(spec.val.values()), steps(spec.test.values())
    per_season = {s: steps([spec.val[s]]) for s in D.SEASONS}
    tr = steps([spec.train])
    law_ok, checked = True, 0
    for L in range(1, 61):
        for d in range(1, 13):
            for h in range(1, 21):
                brute = enumerate_windows(L, d, h)
                if L < d + h:
                    law_ok &= not brute
                    continue
                got = D.make_windows(L, D.WindowSpec(d, h))
                law_ok &= len(got) == L - d - h + 1 == len(brute)
                checked += 1
    ok = val == 2016 and test == 2016 and set(per_season.values()) == {504} and tr == 8760 and law_ok
    record(8, "split/window arithmetic", ok,
           f"val {val} (504/season), test {test}, train {tr}; L-d-h+1 law on {checked} (L,d,h)")


# 9 ---------------------------------------------------------------------------

HORIZONS = (1, 3, 6)
SEEDS = (0, 1, 2)
# Batch 1 buys the most updates per CPU second; batch 8 left h=1 worse than persistence.
TREND = dict(length=2000, hw=32, base_filters=4, depth=4, epochs=8, batch_size=1,
             train_stride=2, val_stride=4)


def horizon_run(series, horizon, seed, cfg=TREND):
    window = D.WindowSpec(10, horizon)
    split = D.SplitSpec.scaled(series.start_time, series.length)
    splits = D.split_by_dates(series, split, window)
    scaled, _ = D.preprocess(series, splits.train_steps)
    train_ds = D.WindowDataset(scaled, splits.train[::cfg["train_stride"]], window)
    val_ds = D.WindowDataset(scaled, splits.all_val()[::cfg["val_stride"]], window)
    test_ds = D.WindowDataset(scaled, splits.all_test(), window)
    model = build_model(ModelConfig(base_filters=cfg["base_filters"], depth=cfg["depth"],
                                    height=cfg["hw"], width=cfg["hw"], seed=seed))
    res = train(model, train_ds, val_ds,
                TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=seed))
    return evaluate_mse(res.best.to_model(), test_ds)


@pytest.mark.slow
def test_c09_horizon_trend():
    t0 = time.perf_counter()
    series = D.synth_generate(0, TREND["length"], TREND["hw"], TREND["hw"])
    table = {h: [horizon_run(series, h, s) for s in SEEDS] for h in HORIZONS}
    medians = [float(np.median(table[h])) for h in HORIZONS]
    dt = time.perf_counter() - t0
    ok = all(a <= b for a, b in zip(medians, medians[1:])) and dt < 3600
    record(9, "horizon-degradation trend", ok,
           "median test MSE " + ", ".join(f"h={h}: {m:.3e}" for h, m in zip(HORIZONS, medians))
           + f" over seeds {SEEDS}, {dt / 60:.1f} min")


# 10 --------------------------------------------------------------------------

def test_c10_serialization(tmp_path):
    rng = np.random.default_rng(1010)
    ok, notes = True, []
    series = D.synth_generate(3, 16, 16, 16)
    D.write_container(series, tmp_path / "s.cten")
    back = D.read_container(tmp_path / "s.cten")
    cont = (back.values.tobytes() == series.values.tobytes()
            and back.mask.tobytes() == series.mask.tobytes()
            and back.start_time == series.start_time and back.variable_names == series.variable_names)
    D.write_container(back, tmp_path / "s2.cten")
    cont &= (tmp_path / "s2.cten").read_bytes() == (tmp_path / "s.cten").read_bytes()
    ok &= cont
    x = rng.uniform(0, 1, (2, 3, 8, 8, 2)).astype(np.float32)
    for arch in ARCHS:
        model = build_model(ModelConfig(arch=arch, base_filters=2, depth=2, lags=3, height=8,
                                        width=8, variables=2))
        forward(model, x, "train")  # move BN running stats off their initial values
        before = forward(model, x, "eval")
        path = tmp_path / f"{arch}.ckpt"
        save_checkpoint(Checkpoint.from_model(model, 1, 0.5), path)
        loaded = load_checkpoint(path)
        bitwise = all(loaded.params[k].tobytes() == v.tobytes() for k, v in model.params.items())
        bitwise &= all(loaded.bn_states[k].running_mean.tobytes() == s.running_mean.tobytes()
                       and loaded.bn_states[k].running_var.tobytes() == s.running_var.tobytes()
                       for k, s in model.bn_states.items())
        save_checkpoint(loaded, tmp_path / f"{arch}.2.ckpt")
        bitwise &= (tmp_path / f"{arch}.2.ckpt").read_bytes() == path.read_bytes()
        after = forward(loaded.to_model(), x, "eval")
        same = np.array_equal(before, after)
        ok &= bitwise and same
        notes.append(f"{arch} {'ok' if bitwise and same else 'MISMATCH'}")
    record(10, "serialization", ok, f"container bitwise {cont}; checkpoints: " + ", ".join(notes))
