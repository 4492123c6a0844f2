"""MSE loss, Adam, the training loop and checkpoint files."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .layers import BatchNormState
from .models import ModelConfig, ModelGraph, build_model, forward, forward_with_params
from .tensor import ShapeError

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointFormatError(ValueError):
    pass


# -- loss --------------------------------------------------------------------

def mse_loss(pred, target):
    """Mean of squared differences over every element (land pixels included)."""
    pv, tv = T.value_of(pred), T.value_of(target)
    if pv.shape != tv.shape:
        raise ShapeError(f"mse_loss: prediction {pv.shape} vs target {tv.shape}")

    def fwd(p, t):
        diff = p - t
        return np.mean(diff * diff), (diff, diff.size)

    def bwd(g, c):
        diff, n = c
        gp = (2.0 / n) * g * diff
        return gp.astype(diff.dtype), (-gp).astype(diff.dtype)
    return T.apply_op("mse", fwd, bwd, pred, target)


# -- Adam --------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        params[name] = (p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)).astype(
            p.dtype)


# -- datasets ----------------------------------------------------------------

class Dataset(Protocol):
    def __len__(self) -> int: ...

    def batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class ArrayDataset:
    """In-memory pairs: inputs ``(N, L, H, W, V)``, targets ``(N, 1, H, W, V)``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ShapeError("inputs and targets differ in length")

    def __len__(self):
        return len(self.inputs)

    def batch(self, indices):
        idx = np.asarray(indices)
        return self.inputs[idx], self.targets[idx]


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]  # last partial batch kept


def evaluate_mse(model: ModelGraph, dataset: Dataset, batch_size: int = 16) -> float:
    """Eval-mode MSE over the whole dataset (mean over every element)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    sq, count = 0.0, 0
    for idx in iter_batches(len(dataset), batch_size):
        x, y = dataset.batch(idx)
        pred = forward(model, x, "eval")
        d = pred.astype(np.float64) - y
        sq += float(np.sum(d * d))
        count += d.size
    return sq / count


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    bn_states: dict[str, BatchNormState]
    epoch: int = 0
    val_loss: float = math.inf
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ModelGraph, epoch=0, val_loss=math.inf, extra=None):
        params, bn = model.copy_state()
        return cls(model.config, params, bn, epoch, val_loss, dict(extra or {}))

    def to_model(self) -> ModelGraph:
        model = build_model(ModelConfig.from_dict(self.config.to_dict()))
        params = {k: v.copy() for k, v in self.params.items()}
        bn = {k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps)
              for k, s in self.bn_states.items()}
        model.load_state(params, bn)
        return model


MAGIC = b"CCKP"
VERSION = 1


def _tensor_items(ckpt: Checkpoint):
    for name, arr in ckpt.params.items():
        yield name, arr
    for name in sorted(ckpt.bn_states):  # header JSON is key-sorted too
        st = ckpt.bn_states[name]
        yield f"{name}.running_mean", st.running_mean
        yield f"{name}.running_var", st.running_var


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian: magic, u32 version, u32-prefixed JSON header, u32 tensor
    count, then per tensor u32-prefixed name, u32 ndim, u64 dims, f32 payload."""
    header = {
        "model": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "bn": {k: {"momentum": s.momentum, "eps": s.eps} for k, s in ckpt.bn_states.items()},
        "extra": ckpt.extra,
    }
    items = list(_tensor_items(ckpt))
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated file: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    header = json.loads(r.take(hlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        dims = r.unpack(f"<{ndim}Q")
        n = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.data):
        raise CheckpointFormatError("trailing bytes after last tensor")
    bn = {}
    for name, meta in header["bn"].items():
        bn[name] = BatchNormState(tensors.pop(f"{name}.running_mean"),
                                  tensors.pop(f"{name}.running_var"),
                                  meta["momentum"], meta["eps"])
    return Checkpoint(ModelConfig.from_dict(header["model"]), tensors, bn,
                      header["epoch"], header["val_loss"], header.get("extra", {}))


# -- loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint
    history: list[tuple[int, float, float]]  # (epoch, train_mse, val_mse)

    def history_csv(self) -> str:
        lines = ["epoch,train_mse,val_mse"]
        lines += [f"{e},{tr!r},{va!r}" for e, tr, va in self.history]
        return "\n".join(lines) + "\n"


def train(model: ModelGraph, train_set: Dataset, val_set: Dataset,
          config: TrainConfig, extra: dict | None = None) -> TrainResult:
    """Mini-batch Adam on MSE; keeps the parameters with the lowest validation MSE."""
    config.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    model.reset_dropout(config.seed)
    state = AdamState()
    history = []
    best: Checkpoint | None = None
    for epoch in range(1, config.epochs + 1):
        sq, count = 0.0, 0
        batches = iter_batches(len(train_set), config.batch_size, rng if config.shuffle else None)
        for b, idx in enumerate(batches):
            x, y = train_set.batch(idx)
            tape = T.Tape()
            pred, leaves = forward_with_params(model, x, "train", tape)
            loss = mse_loss(pred, y)
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(loss)
            adam_step(model.params, {k: v.grad for k, v in leaves.items()}, state, config)
            sq += lv * len(idx)
            count += len(idx)
        train_mse = sq / count
        val_mse = evaluate_mse(model, val_set, config.batch_size)
        if not math.isfinite(val_mse):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, train_mse, val_mse))
        log.info("epoch %d train_mse %.6g val_mse %.6g", epoch, train_mse, val_mse)
        if best is None or val_mse < best.val_loss:
            best = Checkpoint.from_model(model, epoch, val_mse, extra)
    return TrainResult(best, history)
