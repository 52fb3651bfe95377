"""Two-branch segmentation network with bidirectional guidance blocks.

A full-scale branch keeps the input resolution throughout; a multi-scale
branch runs an encoder-decoder schedule. After every paired convolution a
guidance block exchanges resampled features between the branches and gates
each fused result with a one-channel sigmoid attention map computed from the
*other* branch.

Stage k (1..9) of the multi-scale branch runs at resolution 1/2**d_k with
d = (0, 1, 2, 3, 4, 3, 2, 1, 0); pooling follows stages 1-4 and
upsampling precedes stages 6-9. Guidance block k couples full-scale conv k
with multi-scale conv k at scale gap d_k. The head is a 1x1 convolution over
the concatenation of the last gated full-scale map and the stage-9
multi-scale map, followed by a sigmoid.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigurationError, ShapeError
from .tensor import (
    TRAIN,
    ConvParams,
    Tensor,
    activation,
    batch_norm,
    broadcast_mul,
    concat_channels,
    conv2d,
    downsample2,
    sigmoid,
    upsample2,
)


@dataclass(frozen=True)
class BagnetConfig:
    full_scale_depth: int = 8
    multi_scale_depth: int = 9
    full_scale_channels: int = 32
    multi_scale_channels: int = 64
    n_bgb: int = 8
    n_down: int = 4
    n_up: int = 4
    input_channels: int = 1
    input_size: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if not (self.n_down == self.n_up == 4):
            raise ConfigurationError("the multi-scale branch needs exactly 4 down- and 4 up-sampling steps")
        if self.multi_scale_depth != self.n_down + 1 + self.n_up:
            raise ConfigurationError("multi_scale_depth must equal n_down + 1 + n_up")
        if not (self.n_bgb == self.full_scale_depth == self.multi_scale_depth - 1):
            raise ConfigurationError("n_bgb must equal full_scale_depth and multi_scale_depth - 1")
        if min(self.full_scale_channels, self.multi_scale_channels, self.input_channels) < 1:
            raise ConfigurationError("channel counts must be positive")
        if len(self.input_size) != 2:
            raise ConfigurationError("input_size must be (h, w)")
        check_input_size(self, *self.input_size)

    @property
    def scale_schedule(self) -> tuple:
        """Downsampling exponent of each multi-scale stage."""
        down = tuple(range(self.n_down + 1))
        return down + tuple(reversed(down[:-1]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BagnetConfig":
        return cls(**d)


def check_input_size(config: BagnetConfig, h: int, w: int):
    div = 2 ** config.n_down
    if h < div or w < div or h % div or w % div:
        raise ConfigurationError(f"input size {h}x{w} must be a positive multiple of {div}")


TINY_CONFIG = BagnetConfig(full_scale_channels=4, multi_scale_channels=8, input_size=(16, 16))


@dataclass
class BgbParams:
    fuse_m: ConvParams
    fuse_g: ConvParams
    proj_g: ConvParams
    proj_m: ConvParams

    def __post_init__(self):
        if self.proj_g.c_out != 1 or self.proj_m.c_out != 1:
            raise ShapeError("attention projections must have exactly one output channel")

    def layers(self) -> list:
        return [("fuse_m", self.fuse_m), ("fuse_g", self.fuse_g), ("proj_g", self.proj_g), ("proj_m", self.proj_m)]


@dataclass
class ModelParams:
    config: BagnetConfig
    stem_g: ConvParams
    stem_m: ConvParams
    full_layers: list
    ms_layers: list
    bgbs: list
    head: ConvParams

    def layers(self) -> Iterator[tuple]:
        """(name, ConvParams) in declaration order."""
        yield "stem_g", self.stem_g
        yield "stem_m", self.stem_m
        for i, p in enumerate(self.full_layers):
            yield f"full.{i}", p
        for i, p in enumerate(self.ms_layers):
            yield f"ms.{i}", p
        for i, b in enumerate(self.bgbs):
            for name, p in b.layers():
                yield f"bgb.{i}.{name}", p
        yield "head", self.head

    def named_tensors(self) -> list:
        """Learnable tensors as (name, Tensor), in declaration order."""
        out = []
        for lname, p in self.layers():
            out.append((f"{lname}.weight", p.weight))
            out.append((f"{lname}.bias", p.bias))
            if p.has_bn:
                out.append((f"{lname}.bn_gamma", p.bn_gamma))
                out.append((f"{lname}.bn_beta", p.bn_beta))
        return out

    def tensors(self) -> list:
        return [t for _, t in self.named_tensors()]

    def named_buffers(self) -> list:
        """Batch-norm running statistics as (name, array), in declaration order."""
        out = []
        for lname, p in self.layers():
            if p.has_bn:
                out.append((f"{lname}.bn_running_mean", p.bn_running_mean))
                out.append((f"{lname}.bn_running_var", p.bn_running_var))
        return out

    @property
    def dtype(self):
        return self.stem_g.weight.dtype

    def astype(self, dtype) -> "ModelParams":
        """Deep copy with every array cast to ``dtype``."""
        new = copy.deepcopy(self)
        for _, t in new.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        for lname, p in new.layers():
            if p.has_bn:
                p.bn_running_mean = p.bn_running_mean.astype(dtype)
                p.bn_running_var = p.bn_running_var.astype(dtype)
        return new

    def zero_grad(self):
        for t in self.tensors():
            t.grad = None


def layer_table(config: BagnetConfig) -> list:
    """(name, kernel, c_in, c_out, has_bn) for every convolution, in declaration order."""
    g, m, ci = config.full_scale_channels, config.multi_scale_channels, config.input_channels
    rows = [("stem_g", 3, ci, g, True), ("stem_m", 3, ci, m, True)]
    rows += [(f"full.{i}", 3, g, g, True) for i in range(config.full_scale_depth)]
    rows += [(f"ms.{i}", 3, m, m, True) for i in range(config.multi_scale_depth)]
    for i in range(config.n_bgb):
        rows += [
            (f"bgb.{i}.fuse_m", 3, m + g, m, True),
            (f"bgb.{i}.fuse_g", 3, g + m, g, True),
            (f"bgb.{i}.proj_g", 1, g, 1, False),
            (f"bgb.{i}.proj_m", 1, m, 1, False),
        ]
    rows.append(("head", 1, g + m, 1, False))
    return rows


def param_count(config: BagnetConfig) -> int:
    total = 0
    for _, k, cin, cout, bn in layer_table(config):
        total += k * k * cin * cout + cout + (2 * cout if bn else 0)
    return total


def _make_conv(rng, k, cin, cout, bn, dtype, name) -> ConvParams:
    bound = np.sqrt(6.0 / (cin * k * k))
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
    p = ConvParams(
        weight=Tensor(w, requires_grad=True, name=f"{name}.weight"),
        bias=Tensor(np.zeros((1, cout, 1, 1), dtype), requires_grad=True, name=f"{name}.bias"),
    )
    if bn:
        p.bn_gamma = Tensor(np.ones((1, cout, 1, 1), dtype), requires_grad=True, name=f"{name}.bn_gamma")
        p.bn_beta = Tensor(np.zeros((1, cout, 1, 1), dtype), requires_grad=True, name=f"{name}.bn_beta")
        p.bn_running_mean = np.zeros(cout, dtype)
        p.bn_running_var = np.ones(cout, dtype)
    return p


def init_params(config: BagnetConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-uniform conv weights (bound sqrt(6 / fan_in)), zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    convs = {name: _make_conv(rng, k, cin, cout, bn, dtype, name) for name, k, cin, cout, bn in layer_table(config)}
    return ModelParams(
        config=config,
        stem_g=convs["stem_g"],
        stem_m=convs["stem_m"],
        full_layers=[convs[f"full.{i}"] for i in range(config.full_scale_depth)],
        ms_layers=[convs[f"ms.{i}"] for i in range(config.multi_scale_depth)],
        bgbs=[
            BgbParams(*(convs[f"bgb.{i}.{part}"] for part in ("fuse_m", "fuse_g", "proj_g", "proj_m")))
            for i in range(config.n_bgb)
        ],
        head=convs["head"],
    )


def conv_bn_act(x: Tensor, p: ConvParams, mode: str) -> Tensor:
    return activation(batch_norm(conv2d(x, p, mode), p, mode))


@dataclass
class BgbTrace:
    """Intermediate maps of one guidance block, kept for inspection."""

    index: int
    scale_gap: int
    g_to_m: Tensor
    fused_m: Tensor
    alpha_g: Tensor
    m_to_g: Tensor
    fused_g: Tensor
    alpha_m: Tensor
    out_g: Tensor = field(default=None)
    out_m: Tensor = field(default=None)


def bgb_forward(
    f_g: Tensor,
    f_m: Tensor,
    params: BgbParams,
    d: int,
    mode: str = TRAIN,
    *,
    index: int = 0,
    unit_attention: bool = False,
):
    """One bidirectional guidance block.

    Returns ``(out_g, out_m, trace)``. With ``unit_attention`` both attention
    maps are replaced by constant ones, so each output equals its fused map.
    """
    if d < 0:
        raise ConfigurationError(f"BGB {index}: scale gap must be >= 0, got {d}")
    factor = 2 ** d
    try:
        # full-scale -> multi-scale direction
        g_to_m = downsample2(f_g, factor)
        fused_m = conv_bn_act(concat_channels(f_m, g_to_m), params.fuse_m, mode)
        alpha_g = sigmoid(conv2d(g_to_m, params.proj_g, mode))
        # multi-scale -> full-scale direction
        m_to_g = upsample2(f_m, factor)
        fused_g = conv_bn_act(concat_channels(f_g, m_to_g), params.fuse_g, mode)
        alpha_m = sigmoid(conv2d(m_to_g, params.proj_m, mode))
        if unit_attention:
            alpha_g = Tensor(np.ones_like(alpha_g.data))
            alpha_m = Tensor(np.ones_like(alpha_m.data))
        out_m = broadcast_mul(fused_m, alpha_g)
        out_g = broadcast_mul(fused_g, alpha_m)
    except ShapeError as e:
        raise ShapeError(f"BGB {index}: {e}") from e
    trace = BgbTrace(index, d, g_to_m, fused_m, alpha_g, m_to_g, fused_g, alpha_m, out_g, out_m)
    return out_g, out_m, trace


def bagnet_forward(
    image: Tensor,
    params: ModelParams,
    mode: str = TRAIN,
    *,
    traces: Optional[list] = None,
    unit_attention=False,
) -> Tensor:
    """Probability mask (n, 1, H, W) for an (n, c_in, H, W) image batch.

    ``traces``, when given, receives one :class:`BgbTrace` per guidance
    block. ``unit_attention`` is either a bool or a set of block indices
    whose attention maps are forced to one.
    """
    config = params.config
    n, c, h, w = image.shape
    check_input_size(config, h, w)
    if c != config.input_channels:
        raise ShapeError(f"image has {c} channels, model expects {config.input_channels}")

    schedule = config.scale_schedule
    g = conv_bn_act(image, params.stem_g, mode)
    m = conv_bn_act(image, params.stem_m, mode)
    for k in range(config.n_bgb):
        if k > 0:
            if schedule[k] < schedule[k - 1]:
                m = upsample2(m, 2)
            else:
                m = downsample2(m, 2)
        g = conv_bn_act(g, params.full_layers[k], mode)
        m = conv_bn_act(m, params.ms_layers[k], mode)
        forced = unit_attention if isinstance(unit_attention, bool) else k in unit_attention
        g, m, trace = bgb_forward(g, m, params.bgbs[k], schedule[k], mode, index=k, unit_attention=forced)
        if traces is not None:
            traces.append(trace)
    last = config.multi_scale_depth - 1
    m = upsample2(m, 2 ** (schedule[last - 1] - schedule[last]))
    m = conv_bn_act(m, params.ms_layers[last], mode)
    logits = conv2d(concat_channels(g, m), params.head, mode)
    return sigmoid(logits)
