"""U-shaped forecasters with a 3D encoder and a time-reduced decoder.

All four architectures share one skeleton and differ only in the block used
at every encoder, bottleneck and decoder level.  Every encoder output (and
the bottleneck) passes through its own (L,1,1) Valid time reducer, so the
decoder only ever sees temporal extent 1.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    AsymmInceptionResBlock,
    Block,
    Context,
    InceptionResBlock,
    PlainBlock,
    ResidualBlock,
    TimeReducer,
)
from .layers import (
    BatchNormState,
    ConvSpec,
    DropoutSpec,
    Mode,
    maxpool,
    upsample_nearest,
)
from .tensor import ShapeError, Tape

ARCHITECTURES = {
    "3ddr-unet": PlainBlock,
    "res-3ddr-unet": ResidualBlock,
    "inception-res-3ddr-unet": InceptionResBlock,
    "asymm-inception-res-3ddr-unet": AsymmInceptionResBlock,
}


HEAD_BIAS_INIT = 0.55  # midpoint of the scaled sea range [0.1, 1]


class UnknownModelError(ValueError):
    def __init__(self, name):
        super().__init__(f"unknown model {name!r}; valid names: {', '.join(ARCHITECTURES)}")


@dataclass
class ModelConfig:
    arch: str = "3ddr-unet"
    base_filters: int = 16
    depth: int = 4
    lags: int = 10
    height: int = 128
    width: int = 128
    variables: int = 4
    dropout: float = 0.5
    asymm_branch_sizes: tuple[int, ...] = (1, 3, 5, 7, 9)
    seed: int = 0

    def __post_init__(self):
        self.asymm_branch_sizes = tuple(self.asymm_branch_sizes)

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise UnknownModelError(self.arch)
        if self.base_filters < 1 or self.lags < 1 or self.variables < 1 or self.depth < 0:
            raise ValueError("base_filters, lags and variables must be >= 1, depth >= 0")
        step = 2 ** self.depth
        if self.height % step or self.width % step:
            raise ShapeError(
                f"height/width {self.height}x{self.width} not divisible by 2^{self.depth}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["asymm_branch_sizes"] = list(self.asymm_branch_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return (self.lags, self.height, self.width, self.variables)


@dataclass
class Node:
    name: str
    kind: str
    output_shape: tuple[int, ...]
    params: int = 0
    convs: int = 0


@dataclass
class ModelGraph:
    config: ModelConfig
    encoders: list[Block]
    bottleneck: Block
    reducers: list[TimeReducer]  # one per encoder level, then the bottleneck's
    decoders: list[Block]  # ordered deepest first
    head: ConvSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)
    bn_states: dict[str, BatchNormState] = field(default_factory=dict)
    nodes: list[Node] = field(default_factory=list)
    dropout: DropoutSpec | None = None

    def blocks(self) -> list[Block]:
        return [*self.encoders, self.bottleneck, *self.reducers, *self.decoders]

    def conv_specs(self) -> dict[str, ConvSpec]:
        out = {}
        for b in self.blocks():
            out.update(b.convs)
        out["head"] = self.head
        return out

    def reset_dropout(self, seed: int) -> None:
        if self.config.dropout > 0:
            self.dropout = DropoutSpec(self.config.dropout, seed)

    def copy_state(self) -> tuple[dict, dict]:
        params = {k: v.copy() for k, v in self.params.items()}
        bn = {k: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps)
              for k, s in self.bn_states.items()}
        return params, bn

    def load_state(self, params: dict, bn_states: dict) -> None:
        missing = set(self.params) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, v in params.items():
            if k in self.params and v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self.params[k].shape}")
        self.params = {k: params[k] for k in self.params}
        for k, s in bn_states.items():
            self.bn_states[k] = s


def level_filters(config: ModelConfig) -> list[int]:
    """Filter count per level: n, 2n, ..., n * 2^depth (the bottleneck)."""
    return [config.base_filters * 2 ** i for i in range(config.depth + 1)]


def _make_block(config: ModelConfig, name: str, cin: int, cout: int) -> Block:
    cls = ARCHITECTURES[config.arch]
    if cls is AsymmInceptionResBlock:
        return cls(name, cin, cout, config.asymm_branch_sizes)
    return cls(name, cin, cout)


def build_model(config: ModelConfig) -> ModelGraph:
    config.validate()
    widths = level_filters(config)
    d = config.depth
    L, H, W, V = config.input_shape

    encoders = [_make_block(config, f"enc{i}", V if i == 0 else widths[i - 1], widths[i])
                for i in range(d)]
    bottleneck = _make_block(config, "bottleneck", V if d == 0 else widths[d - 1], widths[d])
    reducers = [TimeReducer(f"reduce{i}", widths[i], L) for i in range(d)]
    reducers.append(TimeReducer("reduce_bottleneck", widths[d], L))
    decoders = [_make_block(config, f"dec{i}", widths[i + 1] + widths[i], widths[i])
                for i in reversed(range(d))]
    head = ConvSpec((1, 1, 1), widths[0], V)
    model = ModelGraph(config, encoders, bottleneck, reducers, decoders, head)

    rng = np.random.default_rng(config.seed)
    for block in model.blocks():
        p, s = block.init(rng)
        model.params.update(p)
        model.bn_states.update(s)
    # Zero weights and a mid-range bias: every output starts inside the final
    # ReLU's active region, and the first updates cannot swamp the decoder.
    model.params["head.weights"] = np.zeros(head.kernel + (head.in_channels, head.out_channels),
                                            np.float32)
    model.params["head.bias"] = np.full(head.out_channels, HEAD_BIAS_INIT, np.float32)
    model.reset_dropout(config.seed)
    model.nodes = _trace_shapes(model)
    return model


def _trace_shapes(model: ModelGraph) -> list[Node]:
    c = model.config
    shape = c.input_shape
    nodes = [Node("input", "input", shape)]

    def blk(b: Block, s):
        s = b.output_shape(s)
        nodes.append(Node(b.name, b.kind, s, b.param_count(), b.conv_count()))
        return s

    skips = []
    for i, enc in enumerate(model.encoders):
        shape = blk(enc, shape)
        skips.append(shape)
        t, h, w, ch = shape
        shape = (t, h // 2, w // 2, ch)
        nodes.append(Node(f"pool{i}", "maxpool", shape))
    shape = blk(model.bottleneck, shape)
    if c.dropout > 0:
        nodes.append(Node("dropout", "dropout", shape))
    shape = blk(model.reducers[-1], shape)
    for dec in model.decoders:
        i = int(dec.name[3:])
        t, h, w, ch = shape
        shape = (t, 2 * h, 2 * w, ch)
        nodes.append(Node(f"up{i}", "upsample", shape))
        reduced = blk(model.reducers[i], skips[i])
        shape = (1, shape[1], shape[2], shape[3] + reduced[3])
        nodes.append(Node(f"concat{i}", "concat", shape))
        shape = blk(dec, shape)
    shape = (1, shape[1], shape[2], model.head.out_channels)
    nodes.append(Node("head", "conv+relu", shape, model.head.param_count, 1))
    if shape != (1, c.height, c.width, c.variables):
        raise AssertionError(f"graph output {shape} is not (1,H,W,V)")
    return nodes


def run(model: ModelGraph, ctx: Context, x):
    skips = []
    h = ctx.input(x)
    for enc in model.encoders:
        h = enc(ctx, h)
        skips.append(h)
        h = maxpool(h)
    h = model.bottleneck(ctx, h)
    h = ctx.drop(h)
    h = model.reducers[-1](ctx, h)
    for dec in model.decoders:
        i = int(dec.name[3:])
        h = upsample_nearest(h)
        h = T.concat([h, model.reducers[i](ctx, skips[i])], axis=-1)
        h = dec(ctx, h)
    out = ctx.conv("head", model.head, h)
    return T.relu(out)


def forward_with_params(model: ModelGraph, batch, mode: Mode, tape: Tape | None):
    """Evaluate the graph and also return the name -> leaf Variable mapping."""
    xv = T.value_of(batch)
    c = model.config
    if xv.ndim != 5 or xv.shape[1:] != c.input_shape:
        raise ShapeError(f"batch shape {xv.shape} does not match (B, {c.input_shape})")
    ctx = Context(model.params, model.bn_states, mode, tape, model.dropout)
    return run(model, ctx, batch), ctx.leaves


def forward(model: ModelGraph, batch, mode: Mode = "eval", tape: Tape | None = None):
    """Evaluate the graph on a ``(B, L, H, W, V)`` batch -> ``(B, 1, H, W, V)``.

    With a ``tape`` the result is a Variable recorded on it, otherwise a plain array.
    """
    return forward_with_params(model, batch, mode, tape)[0]


# -- accounting --------------------------------------------------------------

@dataclass
class ParamTable:
    rows: list[tuple[str, int]]  # (layer, params)
    total: int
    conv_layers: int


def count_params(model: ModelGraph) -> ParamTable:
    """Per-layer parameter counts from the analytic conv/BN formulas."""
    rows = []
    for name, spec in model.conv_specs().items():
        rows.append((name, spec.param_count))
    for b in model.blocks():
        for name, ch in b.norms.items():
            rows.append((name, 2 * ch))
    total = sum(n for _, n in rows)
    return ParamTable(rows, total, len(model.conv_specs()))


def _fmt_shape(shape) -> str:
    return "x".join(str(s) for s in shape)


def summarize(model: ModelGraph, fmt: str = "text") -> str:
    """Ordered layer listing with output shapes and parameter counts."""
    total = sum(n.params for n in model.nodes)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "output_shape", "params"])
        for n in model.nodes:
            w.writerow([n.name, _fmt_shape(n.output_shape), n.params])
        w.writerow(["total", "", total])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    lines = [f"input {tuple(model.config.input_shape)}"]
    for n in model.nodes[1:]:
        lines.append(f"{n.name:<20} {n.kind:<26} {str(n.output_shape):<22} {n.params:>10}")
    lines.append(f"{'total':<20} {'':<26} {'':<22} {total:>10}")
    return "\n".join(lines) + "\n"
