"""Composite blocks: plain, residual, inception-residual, asymmetric
inception-residual, and the temporal reducer.

A block only describes its layers.  Parameters live in a flat name->array
dict owned by the model; a :class:`Context` hands them out (as tape leaves
when a gradient is wanted) while the block runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    BatchNormState,
    ConvSpec,
    DropoutSpec,
    LayerParams,
    Mode,
    batchnorm,
    conv3d,
    dropout,
    he_init,
    time_reduce_conv,
)
from .tensor import ShapeError, Tape


@dataclass
class Context:
    params: dict[str, np.ndarray]
    bn_states: dict[str, BatchNormState] = field(default_factory=dict)
    mode: Mode = "eval"
    tape: Tape | None = None
    dropout: DropoutSpec | None = None
    leaves: dict[str, T.Variable] = field(default_factory=dict)

    def param(self, name: str):
        if self.tape is None:
            return self.params[name]
        if name not in self.leaves:
            self.leaves[name] = self.tape.variable(self.params[name], name=name)
        return self.leaves[name]

    def input(self, x):
        return x if self.tape is None or isinstance(x, T.Variable) else self.tape.constant(x)

    def conv(self, name: str, spec: ConvSpec, x):
        bias = self.param(f"{name}.bias") if spec.use_bias else None
        return conv3d(x, spec, LayerParams(self.param(f"{name}.weights"), bias))

    def bn(self, name: str, x):
        return batchnorm(x, self.param(f"{name}.gamma"), self.param(f"{name}.beta"),
                         self.bn_states[name], self.mode)

    def drop(self, x):
        return x if self.dropout is None else dropout(x, self.dropout, self.mode)


class Block:
    """Base class: ordered conv specs + batch-norm layers under a name prefix."""

    kind = "block"

    def __init__(self, name: str, in_channels: int, out_channels: int):
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be positive")
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.convs: dict[str, ConvSpec] = {}
        self.norms: dict[str, int] = {}

    def _add_conv(self, local: str, kernel, cin: int, cout: int, padding="same") -> str:
        full = f"{self.name}.{local}"
        self.convs[full] = ConvSpec(tuple(kernel), cin, cout, padding)
        return full

    def _add_bn(self, local: str, channels: int) -> str:
        full = f"{self.name}.{local}"
        self.norms[full] = channels
        return full

    def _projection(self):
        # identity skip when widths agree, otherwise a 1x1x1 conv
        if self.in_channels != self.out_channels:
            return self._add_conv("proj", (1, 1, 1), self.in_channels, self.out_channels)
        return None

    def init(self, rng: np.random.Generator, dtype=np.float32):
        params, states = {}, {}
        for name, spec in self.convs.items():
            lp = he_init(spec, rng, dtype)
            params[f"{name}.weights"] = lp.weights
            if lp.bias is not None:
                params[f"{name}.bias"] = lp.bias
        for name, ch in self.norms.items():
            params[f"{name}.gamma"] = np.ones(ch, dtype)
            params[f"{name}.beta"] = np.zeros(ch, dtype)
            states[name] = BatchNormState.fresh(ch, dtype)
        return params, states

    def param_count(self) -> int:
        return sum(s.param_count for s in self.convs.values()) + 2 * sum(self.norms.values())

    def conv_count(self) -> int:
        return len(self.convs)

    def output_shape(self, shape):
        t, h, w, c = shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expects {self.in_channels} channels, got {c}")
        return (t, h, w, self.out_channels)

    def _check(self, x):
        c = T.value_of(x).shape[-1]
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expects {self.in_channels} channels, got {c}")

    def _residual_tail(self, ctx: Context, x, merged, bn_name, proj_name):
        y = ctx.bn(bn_name, merged)
        skip = ctx.conv(proj_name, self.convs[proj_name], x) if proj_name else x
        return T.relu(T.add(y, skip))

    def __call__(self, ctx: Context, x):
        raise NotImplementedError


class PlainBlock(Block):
    """Two 3x3x3 Same convolutions, each followed by ReLU."""

    kind = "plain"

    def __init__(self, name, in_channels, out_channels):
        super().__init__(name, in_channels, out_channels)
        self.c1 = self._add_conv("conv1", (3, 3, 3), in_channels, out_channels)
        self.c2 = self._add_conv("conv2", (3, 3, 3), out_channels, out_channels)

    def __call__(self, ctx, x):
        self._check(x)
        h = T.relu(ctx.conv(self.c1, self.convs[self.c1], x))
        return T.relu(ctx.conv(self.c2, self.convs[self.c2], h))


class ResidualBlock(Block):
    """conv-ReLU-conv-ReLU-conv-BN, plus the (projected) input, then ReLU."""

    kind = "residual"

    def __init__(self, name, in_channels, out_channels):
        super().__init__(name, in_channels, out_channels)
        self.c1 = self._add_conv("conv1", (3, 3, 3), in_channels, out_channels)
        self.c2 = self._add_conv("conv2", (3, 3, 3), out_channels, out_channels)
        self.c3 = self._add_conv("conv3", (3, 3, 3), out_channels, out_channels)
        self.bn = self._add_bn("bn", out_channels)
        self.proj = self._projection()

    def __call__(self, ctx, x):
        self._check(x)
        h = T.relu(ctx.conv(self.c1, self.convs[self.c1], x))
        h = T.relu(ctx.conv(self.c2, self.convs[self.c2], h))
        h = ctx.conv(self.c3, self.convs[self.c3], h)
        return self._residual_tail(ctx, x, h, self.bn, self.proj)


class InceptionResBlock(Block):
    """Three parallel branches (1x1x1, 3x3x3, two stacked 3x3x3), each led by a
    1x1x1 reducer that halves the input width.  Branches are concatenated and
    mixed by a 1x1x1 conv before the residual add."""

    kind = "inception_residual"

    def __init__(self, name, in_channels, out_channels):
        super().__init__(name, in_channels, out_channels)
        r = max(1, in_channels // 2)
        c = out_channels
        self.reduced = r
        self.branches = [
            [self._add_conv("a.reduce", (1, 1, 1), in_channels, r),
             self._add_conv("a.conv", (1, 1, 1), r, c)],
            [self._add_conv("b.reduce", (1, 1, 1), in_channels, r),
             self._add_conv("b.conv", (3, 3, 3), r, c)],
            [self._add_conv("c.reduce", (1, 1, 1), in_channels, r),
             self._add_conv("c.conv1", (3, 3, 3), r, c),
             self._add_conv("c.conv2", (3, 3, 3), c, c)],
        ]
        self.combine = self._add_conv("combine", (1, 1, 1), 3 * c, c)
        self.bn = self._add_bn("bn", c)
        self.proj = self._projection()

    def branch_outputs(self, ctx, x):
        outs = []
        for chain in self.branches:
            h = x
            for name in chain:
                h = T.relu(ctx.conv(name, self.convs[name], h))
            outs.append(h)
        return outs

    def __call__(self, ctx, x):
        self._check(x)
        merged = ctx.conv(self.combine, self.convs[self.combine],
                          T.concat(self.branch_outputs(ctx, x), axis=-1))
        return self._residual_tail(ctx, x, merged, self.bn, self.proj)


def asymm_chain_specs(k: int, in_channels: int, out_channels: int) -> list[ConvSpec]:
    """The (k,1,1) -> (1,k,1) -> (1,1,k) factorisation of a k^3 kernel."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"asymmetric kernel extent must be odd, got {k}")
    return [ConvSpec((k, 1, 1), in_channels, out_channels),
            ConvSpec((1, k, 1), out_channels, out_channels),
            ConvSpec((1, 1, k), out_channels, out_channels)]


def asymm_conv_chain(x, k: int, params: list[LayerParams]):
    """Apply three consecutive 1D Same convolutions along T, H and W (no nonlinearity)."""
    if len(params) != 3:
        raise ValueError("an asymmetric chain has exactly three stages")
    cin = T.value_of(x).shape[-1]
    cout = T.value_of(params[0].weights).shape[-1]
    h = x
    for spec, lp in zip(asymm_chain_specs(k, cin, cout), params):
        h = conv3d(h, spec, lp)
    return h


class AsymmInceptionResBlock(Block):
    """Parallel asymmetric chains of sizes ``branch_sizes`` (no leading
    reducers), concatenated, mixed by a 1x1x1 conv, then the residual tail."""

    kind = "asymm_inception_residual"

    def __init__(self, name, in_channels, out_channels, branch_sizes=(1, 3, 5, 7, 9)):
        super().__init__(name, in_channels, out_channels)
        c = out_channels
        self.branch_sizes = tuple(branch_sizes)
        if not self.branch_sizes:
            raise ValueError("need at least one branch")
        self.branches = []
        for k in self.branch_sizes:
            specs = asymm_chain_specs(k, in_channels, c)
            names = []
            for axis, spec in zip("thw", specs):
                names.append(self._add_conv(f"k{k}.{axis}", spec.kernel, spec.in_channels,
                                            spec.out_channels))
            self.branches.append(names)
        self.combine = self._add_conv("combine", (1, 1, 1), len(self.branch_sizes) * c, c)
        self.bn = self._add_bn("bn", c)
        self.proj = self._projection()

    def branch_outputs(self, ctx, x):
        outs = []
        for names in self.branches:
            h = x
            for name in names:
                h = ctx.conv(name, self.convs[name], h)
            outs.append(T.relu(h))
        return outs

    def __call__(self, ctx, x):
        self._check(x)
        merged = ctx.conv(self.combine, self.convs[self.combine],
                          T.concat(self.branch_outputs(ctx, x), axis=-1))
        return self._residual_tail(ctx, x, merged, self.bn, self.proj)


class TimeReducer(Block):
    """(L,1,1) Valid convolution: a learned weighted average over the lags."""

    kind = "time_reducer"

    def __init__(self, name, channels: int, lags: int, out_channels: int | None = None):
        super().__init__(name, channels, out_channels or channels)
        if lags < 1:
            raise ValueError("lags must be >= 1")
        self.lags = lags
        self.conv = self._add_conv("conv", (lags, 1, 1), channels, self.out_channels, "valid")

    def output_shape(self, shape):
        t, h, w, c = super().output_shape(shape)
        if t != self.lags:
            raise T.ContractError(f"{self.name}: spans {self.lags} lags, input has {t}")
        return (1, h, w, c)

    def __call__(self, ctx, x):
        self._check(x)
        return time_reduce_conv(x, LayerParams(ctx.param(f"{self.conv}.weights"),
                                               ctx.param(f"{self.conv}.bias")))


BLOCK_KINDS = {
    "plain": PlainBlock,
    "residual": ResidualBlock,
    "inception_residual": InceptionResBlock,
    "asymm_inception_residual": AsymmInceptionResBlock,
}


def run_block(block: Block, params, x, mode: Mode = "eval", bn_states=None,
              drop: DropoutSpec | None = None):
    """Evaluate one block on plain arrays (no tape)."""
    ctx = Context(params, bn_states or {}, mode, None, drop)
    return block(ctx, x)


def residual_block(x, block: ResidualBlock, params, mode: Mode = "train", bn_states=None):
    return run_block(block, params, x, mode, bn_states)


def inception_res_block(x, block: InceptionResBlock, params, mode: Mode = "train",
                        bn_states=None):
    return run_block(block, params, x, mode, bn_states)


def asymm_inception_res_block(x, block: AsymmInceptionResBlock, params, mode: Mode = "train",
                              bn_states=None):
    return run_block(block, params, x, mode, bn_states)
