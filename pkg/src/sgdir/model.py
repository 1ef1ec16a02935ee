"""Time-embedded UNet ``F(x, t; I_f, I_m)`` and the flow parameterization
``phi_t(x) = x + t * F(x, t)``."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np

from .diff import Node, ParamVector, Tape
from .errors import GeometryMismatch, NonDivisibleDims, ShapeError, TimeOutOfRange
from .grid import DisplacementField, ScalarImage

_forward_calls = 0


def forward_calls() -> int:
    """Number of network evaluations since import (instrumentation)."""
    return _forward_calls


@dataclass(frozen=True)
class TimeEmbeddingConfig:
    dim: int = 64
    t_scale: float = 100.0
    freq_base: float = 10000.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"embedding dim must be even and >= 2, got {self.dim}")
        if self.t_scale <= 0:
            raise ValueError("t_scale must be positive")


@dataclass(frozen=True)
class FieldModelConfig:
    rank: int = 2
    channels: Tuple[int, ...] = (16, 32, 64)
    in_channels: int = 2
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.rank not in (2, 3):
            raise ValueError("rank must be 2 or 3")
        if len(self.channels) < 2:
            raise ValueError("need at least two stages")
        if self.activation != "silu":
            raise ValueError("only silu is supported")

    @property
    def out_channels(self) -> int:
        return self.rank


def time_embedding(t: float, cfg: TimeEmbeddingConfig) -> np.ndarray:
    if abs(t) > 1:
        raise TimeOutOfRange(f"t={t} outside [-1, 1]")
    half = cfg.dim // 2
    freqs = cfg.freq_base ** (-np.arange(half) / half)
    arg = t * cfg.t_scale * freqs
    out = np.empty(cfg.dim)
    out[0::2] = np.sin(arg)
    out[1::2] = np.cos(arg)
    return out


def _conv_shapes(rank, cin, cout):
    return {"w": (cout, 3 ** rank, cin), "b": (cout,)}


def param_shapes(cfg: FieldModelConfig, embed: TimeEmbeddingConfig) -> Dict[str, tuple]:
    """Ordered parameter shapes of the UNet."""
    shapes = {}

    def conv(name, cin, cout):
        for k, s in _conv_shapes(cfg.rank, cin, cout).items():
            shapes[f"{name}.{k}"] = s

    def proj(name, cout):
        shapes[f"{name}.w"] = (cout, embed.dim)
        shapes[f"{name}.b"] = (cout,)

    ch = cfg.channels
    cin = cfg.in_channels
    for level, c in enumerate(ch):
        conv(f"enc{level}.conv1", cin, c)
        proj(f"enc{level}.time", c)
        conv(f"enc{level}.conv2", c, c)
        cin = c
    for level in range(len(ch) - 2, -1, -1):
        conv(f"dec{level}.up", ch[level + 1], ch[level])
        conv(f"dec{level}.conv", 2 * ch[level], ch[level])
        proj(f"dec{level}.time", ch[level])
    conv("head", ch[0], cfg.out_channels)
    return shapes


@dataclass
class FieldModel:
    config: FieldModelConfig
    embed: TimeEmbeddingConfig
    params: ParamVector

    def __post_init__(self):
        expected = sum(int(np.prod(s)) for s in param_shapes(self.config, self.embed).values())
        if len(self.params) != expected:
            raise ShapeError(f"model needs {expected} parameters, got {len(self.params)}")

    def with_params(self, params: ParamVector) -> "FieldModel":
        return FieldModel(self.config, self.embed, params)

    def trace_field(self, tape: Tape, fixed: ScalarImage, moving: ScalarImage, t: float) -> Node:
        """Record one network evaluation ``F(., t)`` on ``tape``."""
        global _forward_calls
        _check_inputs(self.config, fixed, moving)
        _forward_calls += 1
        p = tape.bind(self.params)
        emb = tape.constant(time_embedding(t, self.embed))
        x = tape.constant(np.stack([fixed.values, moving.values]))

        def conv(name, h):
            return tape.record("conv", [h, p[f"{name}.w"], p[f"{name}.b"]])

        def film(name, h):
            shift = tape.record("affine", [p[f"{name}.w"], emb, p[f"{name}.b"]])
            return tape.record("add_channel", [h, shift])

        def act(h):
            return tape.record("silu", [h])

        skips = []
        h = x
        n = len(self.config.channels)
        for level in range(n):
            if level:
                h = tape.record("avgpool2", [h])
            h = act(film(f"enc{level}.time", conv(f"enc{level}.conv1", h)))
            h = act(conv(f"enc{level}.conv2", h))
            skips.append(h)
        for level in range(n - 2, -1, -1):
            h = act(conv(f"dec{level}.up", tape.record("upsample2", [h])))
            h = tape.record("concat", [h, skips[level]])
            h = act(film(f"dec{level}.time", conv(f"dec{level}.conv", h)))
        return conv("head", h)

    def trace_deformation(self, tape: Tape, fixed: ScalarImage, moving: ScalarImage, t: float) -> Node:
        """Displacement ``u_t = t * F(., t)`` as a tape node."""
        if abs(t) > 1:
            raise TimeOutOfRange(f"t={t} outside [-1, 1]")
        field = self.trace_field(tape, fixed, moving, t)
        if t == 0:
            # exact identity; the network is still evaluated so every call
            # site costs the same number of forward passes
            return tape.constant(np.zeros(field.shape))
        return field * float(t)


def _check_inputs(cfg: FieldModelConfig, fixed: ScalarImage, moving: ScalarImage) -> None:
    if fixed.geom != moving.geom:
        raise GeometryMismatch(f"{fixed.geom} vs {moving.geom}")
    if fixed.geom.rank != cfg.rank:
        raise GeometryMismatch(f"model rank {cfg.rank}, images rank {fixed.geom.rank}")
    factor = 2 ** (len(cfg.channels) - 1)
    if any(d % factor for d in fixed.geom.dims):
        raise NonDivisibleDims(f"dims {fixed.geom.dims} not divisible by {factor}")


def field_forward(m: FieldModel, fixed: ScalarImage, moving: ScalarImage, t: float,
                  dtype=np.float32) -> DisplacementField:
    node = m.trace_field(Tape(dtype, grad=False), fixed, moving, t)
    return DisplacementField(fixed.geom, node.value, time_tag=t)


def deformation_at(m: FieldModel, fixed: ScalarImage, moving: ScalarImage, t: float,
                   dtype=np.float32) -> DisplacementField:
    node = m.trace_deformation(Tape(dtype, grad=False), fixed, moving, t)
    return DisplacementField(fixed.geom, node.value, time_tag=t)


def init_params(cfg: FieldModelConfig, embed: TimeEmbeddingConfig = TimeEmbeddingConfig(),
                seed: int = 0) -> FieldModel:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, zero output head."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg, embed)
    pv = ParamVector.from_shapes(shapes)
    for name, shape in shapes.items():
        if name.endswith(".b") or name.startswith("head."):
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        pv.view(name)[...] = rng.uniform(-bound, bound, size=shape)
    return FieldModel(cfg, embed, pv)


def constant_flow_model(cfg: FieldModelConfig, embed: TimeEmbeddingConfig, velocity) -> FieldModel:
    """A model whose network output is the constant vector ``velocity``
    everywhere, i.e. a pure translation flow ``u_t = t * velocity``."""
    pv = ParamVector.from_shapes(param_shapes(cfg, embed))
    pv.view("head.b")[...] = np.asarray(velocity, dtype=np.float64)
    return FieldModel(cfg, embed, pv)


def config_dict(m: FieldModel) -> dict:
    return {"model": asdict(m.config), "embed": asdict(m.embed)}
