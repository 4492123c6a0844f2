"""Differentiable layers over channel-last 5D tensors ``(B, T, H, W, C)``.

Every op also accepts a single sample ``(T, H, W, C)`` and returns the same
rank it was given.  Arguments may be numpy arrays or tape
:class:`~coastcast.tensor.Variable` objects; see :func:`coastcast.tensor.apply_op`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .tensor import ContractError, ShapeError, Variable, apply_op, value_of

Padding = Literal["same", "valid"]
Mode = Literal["train", "eval"]


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int, int]
    in_channels: int
    out_channels: int
    padding: Padding = "same"
    use_bias: bool = True

    def __post_init__(self):
        if len(self.kernel) != 3 or min(self.kernel) < 1:
            raise ValueError(f"kernel must be three positive extents, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {self.padding!r}")

    @property
    def fan_in(self) -> int:
        kt, kh, kw = self.kernel
        return kt * kh * kw * self.in_channels

    @property
    def param_count(self) -> int:
        return self.fan_in * self.out_channels + (self.out_channels if self.use_bias else 0)

    def output_extents(self, extents: tuple[int, int, int]) -> tuple[int, int, int]:
        if self.padding == "same":
            return tuple(extents)
        out = tuple(d - k + 1 for d, k in zip(extents, self.kernel))
        if min(out) < 1:
            raise ShapeError(f"valid padding needs extents >= kernel {self.kernel}, got {extents}")
        return out


@dataclass
class LayerParams:
    weights: np.ndarray | Variable  # (kt, kh, kw, in, out)
    bias: np.ndarray | Variable | None = None

    @property
    def count(self) -> int:
        n = value_of(self.weights).size
        return n + (value_of(self.bias).size if self.bias is not None else 0)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (gamma/beta live with the params)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


@dataclass
class DropoutSpec:
    rate: float = 0.5
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        self.rng = np.random.default_rng(self.seed)


def _as5d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 5:
        return x, False
    if x.ndim == 4:
        return x[None], True
    raise ShapeError(f"expected (T,H,W,C) or (B,T,H,W,C), got shape {x.shape}")


def _batched(fn):
    """Wrap a 5D forward so it also serves 4D inputs and gradients."""
    def fwd(x, *rest):
        x5, squeezed = _as5d(x)
        out, ctx = fn(x5, *rest)
        return (out[0] if squeezed else out), (ctx, squeezed)
    return fwd


def _unbatched(bwd):
    def back(g, c):
        ctx, squeezed = c
        grads = bwd(g[None] if squeezed else g, ctx)
        if squeezed:
            grads = (grads[0][0],) + tuple(grads[1:])
        return grads
    return back


# -- convolution -------------------------------------------------------------

def same_pads(kernel) -> list[tuple[int, int]]:
    """Zero padding per axis for Same output; odd remainder goes high."""
    return [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in kernel]


def _conv_forward(x, w, b, padding):
    kt, kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv3d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if padding == "same":
        pads = same_pads((kt, kh, kw))
        xp = np.pad(x, [(0, 0), *pads, (0, 0)])
    elif padding == "valid":
        xp = x
    else:
        raise ValueError(f"unknown padding {padding!r}")
    bsz, tp, hp, wp, _ = xp.shape
    to, ho, wo = tp - kt + 1, hp - kh + 1, wp - kw + 1
    if min(to, ho, wo) < 1:
        raise ShapeError(f"conv3d: extents {x.shape[1:4]} smaller than kernel {(kt, kh, kw)}")
    dtype = np.result_type(x, w)
    out = np.zeros((bsz * to * ho * wo, cout), dtype=dtype)
    for p in range(kt):
        for q in range(kh):
            for r in range(kw):
                patch = np.ascontiguousarray(xp[:, p:p + to, q:q + ho, r:r + wo, :])
                out += patch.reshape(-1, cin) @ w[p, q, r]
    if b is not None:
        out += b
    return out.reshape(bsz, to, ho, wo, cout), (xp, w, padding, x.shape, b is not None)


def _conv_backward(g, ctx):
    xp, w, padding, xshape, has_bias = ctx
    kt, kh, kw, cin, cout = w.shape
    bsz, to, ho, wo, _ = g.shape
    g2 = g.reshape(-1, cout)
    gw = np.zeros_like(w)
    gxp = np.zeros(xp.shape, dtype=np.result_type(g, w))
    for p in range(kt):
        for q in range(kh):
            for r in range(kw):
                patch = np.ascontiguousarray(xp[:, p:p + to, q:q + ho, r:r + wo, :])
                gw[p, q, r] = patch.reshape(-1, cin).T @ g2
                gxp[:, p:p + to, q:q + ho, r:r + wo, :] += (g2 @ w[p, q, r].T).reshape(
                    bsz, to, ho, wo, cin)
    if padding == "same":
        (t0, _), (h0, _), (w0, _) = same_pads((kt, kh, kw))
        gx = gxp[:, t0:t0 + xshape[1], h0:h0 + xshape[2], w0:w0 + xshape[3], :]
    else:
        gx = gxp
    gb = g2.sum(axis=0) if has_bias else None
    return gx, gw, gb


def conv3d_raw(x, weights, bias=None, padding: Padding = "same"):
    """Cross-correlation of ``x`` with ``weights`` (kt,kh,kw,in,out) plus bias."""
    if value_of(weights).ndim != 5:
        raise ShapeError("weights must be (kt, kh, kw, in, out)")
    fwd = _batched(lambda x5, w, *b: _conv_forward(x5, w, b[0] if b else None, padding))
    bwd = _unbatched(lambda g, c: _conv_backward(g, c))
    if bias is None:
        return apply_op("conv3d", fwd, lambda g, c: bwd(g, c)[:2], x, weights)
    return apply_op("conv3d", fwd, bwd, x, weights, bias)


def conv3d(x, spec: ConvSpec, params: LayerParams):
    wshape = value_of(params.weights).shape
    if wshape != (*spec.kernel, spec.in_channels, spec.out_channels):
        raise ShapeError(f"weights {wshape} do not match {spec}")
    if value_of(x).shape[-1] != spec.in_channels:
        raise ShapeError(
            f"conv3d: input has {value_of(x).shape[-1]} channels, spec expects {spec.in_channels}")
    bias = params.bias if spec.use_bias else None
    return conv3d_raw(x, params.weights, bias, spec.padding)


def time_reduce_conv(x, params: LayerParams):
    """Collapse the temporal axis with an (L,1,1) Valid convolution."""
    lags = value_of(x).shape[-4]
    kt, kh, kw = value_of(params.weights).shape[:3]
    if (kh, kw) != (1, 1):
        raise ShapeError("time reducer kernel must be (L, 1, 1)")
    if kt != lags:
        raise ContractError(f"time reducer spans {kt} steps but input has {lags} lags")
    return conv3d_raw(x, params.weights, params.bias, "valid")


# -- pooling / upsampling ----------------------------------------------------

def _pool_forward(x):
    b, t, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool (1,2,2) needs even H and W, got {h}x{w}")
    win = x.reshape(b, t, h // 2, 2, w // 2, 2, c).transpose(0, 1, 2, 4, 6, 3, 5)
    win = win.reshape(b, t, h // 2, w // 2, c, 4)
    idx = np.argmax(win, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def _pool_backward(g, ctx):
    idx, (b, t, h, w, c) = ctx
    onehot = idx[..., None] == np.arange(4)
    gw = np.where(onehot, g[..., None], np.zeros((), g.dtype))
    gw = gw.reshape(b, t, h // 2, w // 2, c, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4)
    return (gw.reshape(b, t, h, w, c),)


def maxpool(x):
    """Non-overlapping (1,2,2) max pooling; the time axis is untouched."""
    return apply_op("maxpool", _batched(_pool_forward), _unbatched(_pool_backward), x)


def _up_forward(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), x.shape


def _up_backward(g, shape):
    b, t, h, w, c = shape
    return (g.reshape(b, t, h, 2, w, 2, c).sum(axis=(3, 5)),)


def upsample_nearest(x):
    """Replicate every value into a 2x2 spatial block, factor (1,2,2)."""
    return apply_op("upsample", _batched(_up_forward), _unbatched(_up_backward), x)


# -- normalisation / regularisation -----------------------------------------

def batchnorm(x, gamma, beta, state: BatchNormState, mode: Mode = "train"):
    """Per-channel batch norm over every axis except the last."""
    xv = value_of(x)
    channels = state.running_mean.shape[0]
    if xv.shape[-1] != channels:
        raise ShapeError(f"batchnorm: {xv.shape[-1]} channels, state has {channels}")
    if xv.size == 0 or xv.shape[0] == 0:
        raise ContractError("batchnorm on an empty batch")
    axes = tuple(range(xv.ndim - 1))
    eps = state.eps

    if mode == "train":
        def fwd(xa, ga, ba):
            mu = xa.mean(axis=axes)
            var = xa.var(axis=axes)
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (xa - mu) * inv
            m = state.momentum
            state.running_mean = (m * state.running_mean + (1 - m) * mu).astype(
                state.running_mean.dtype)
            state.running_var = (m * state.running_var + (1 - m) * var).astype(
                state.running_var.dtype)
            return xhat * ga + ba, (xhat, inv, ga)

        def bwd(g, c):
            xhat, inv, ga = c
            n = g.size // g.shape[-1]
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dxhat = g * ga
            dx = inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            return dx.astype(g.dtype), dgamma, dbeta
    elif mode == "eval":
        def fwd(xa, ga, ba):
            inv = (1.0 / np.sqrt(state.running_var + eps)).astype(xa.dtype)
            xhat = (xa - state.running_mean.astype(xa.dtype)) * inv
            return xhat * ga + ba, (xhat, inv, ga)

        def bwd(g, c):
            xhat, inv, ga = c
            return g * (ga * inv), (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return apply_op("batchnorm", fwd, bwd, x, gamma, beta)


def dropout(x, spec: DropoutSpec, mode: Mode = "train"):
    """Inverted dropout; the identity in eval mode or at rate 0."""
    if mode == "eval" or spec.rate == 0:
        return x
    xv = value_of(x)
    keep = (spec.rng.random(xv.shape) >= spec.rate).astype(xv.dtype) / xv.dtype.type(1 - spec.rate)
    return apply_op("dropout", lambda a: (a * keep, None), lambda g, _: (g * keep,), x)


# -- initialisation ----------------------------------------------------------

def he_bound(spec: ConvSpec) -> float:
    return math.sqrt(6.0 / spec.fan_in)


def he_init(spec: ConvSpec, seed=None, dtype=np.float32) -> LayerParams:
    """Uniform(-b, b) weights with b = sqrt(6 / fan_in); zero bias."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    b = he_bound(spec)
    shape = (*spec.kernel, spec.in_channels, spec.out_channels)
    weights = rng.uniform(-b, b, size=shape).astype(dtype)
    bias = np.zeros(spec.out_channels, dtype) if spec.use_bias else None
    return LayerParams(weights, bias)
