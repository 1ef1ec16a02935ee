"""Adam, time sampling, the training loop and binary checkpoints."""
from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Tuple, Union

import numpy as np

from .diff import ParamVector, Tape
from .errors import GeometryMismatch, NonFiniteLoss, ShapeError, UnsupportedCheckpoint
from .loss import LossConfig, loss_terms
from .model import FieldModel, FieldModelConfig, TimeEmbeddingConfig


@dataclass(frozen=True)
class TrainConfig:
    """``time_mode`` is ``"continuous"`` or a non-negative int ``k`` for the
    discrete schedule.  ``lam``, when set, overrides ``LossConfig.lam``."""
    mode: str = "instance"
    iters: int = 1000
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    time_mode: Union[str, int] = "continuous"
    seed: int = 0
    log_every: int = 1
    lam: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.mode not in ("instance", "dataset"):
            raise ValueError(f"mode must be instance or dataset, got {self.mode!r}")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.time_mode != "continuous":
            if isinstance(self.time_mode, bool) or not isinstance(self.time_mode, (int, np.integer)) \
                    or self.time_mode < 0:
                raise ValueError(f"time_mode must be 'continuous' or an int >= 0, got {self.time_mode!r}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise ShapeError("moment vectors differ in shape")
        if self.step < 0:
            raise ValueError("step must be >= 0")

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(state: AdamState, grad: np.ndarray, params: np.ndarray, lr: float,
                betas=(0.9, 0.999), eps: float = 1e-8) -> Tuple[AdamState, np.ndarray]:
    """Bias-corrected Adam on flat float64 vectors; inputs are not mutated."""
    grad = np.asarray(grad, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if grad.shape != params.shape or grad.shape != state.m.shape:
        raise ShapeError(f"grad {grad.shape}, params {params.shape}, state {state.m.shape}")
    b1, b2 = betas
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    return AdamState(m, v, step), params - lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(state: AdamState, grads: ParamVector, params: ParamVector,
              cfg: TrainConfig) -> Tuple[AdamState, ParamVector]:
    if grads.layout != params.layout:
        raise ShapeError("gradient and parameter layouts differ")
    state, values = adam_update(state, grads.values, params.values, cfg.lr, cfg.betas, cfg.adam_eps)
    return state, params.with_values(values)


def time_support(mode) -> Optional[np.ndarray]:
    """The finite set of times a discrete mode draws from (``None`` for
    continuous)."""
    if mode == "continuous":
        return None
    k = int(mode)
    return np.append(np.arange(1, k + 1) / (k + 1), 1.0)


def sample_time(mode, rng: np.random.Generator) -> float:
    support = time_support(mode)
    if support is None:
        return float(rng.uniform(0.0, 1.0))
    if len(support) == 1:
        return 1.0
    return float(support[rng.integers(len(support))])


@dataclass
class TrainLog:
    iters: List[int] = field(default_factory=list)
    t_sampled: List[float] = field(default_factory=list)
    sim_loss: List[float] = field(default_factory=list)
    semigroup_loss: List[float] = field(default_factory=list)
    total_loss: List[float] = field(default_factory=list)
    wall_ms: List[float] = field(default_factory=list)

    HEADER = ("iter", "t_sampled", "sim_loss", "semigroup_loss", "total_loss", "wall_ms")

    def append(self, it, t, sim, sg, total, ms):
        if self.iters and it <= self.iters[-1]:
            raise ValueError("log iterations must increase")
        for name, val in zip(self.HEADER, (it, t, sim, sg, total, ms)):
            getattr(self, name if name != "iter" else "iters").append(val)

    def __len__(self):
        return len(self.iters)

    def extend(self, other: "TrainLog") -> None:
        for row in other.rows():
            self.append(*row)

    def rows(self):
        return list(zip(self.iters, self.t_sampled, self.sim_loss, self.semigroup_loss,
                        self.total_loss, self.wall_ms))

    def write_csv(self, path, timing: bool = True) -> None:
        """``timing=False`` drops the wall-clock column so the file is
        reproducible byte for byte."""
        keep = len(self.HEADER) if timing else len(self.HEADER) - 1
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER[:keep])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:keep]])


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""
    model: FieldModel
    adam: AdamState
    rng_state: dict
    iteration: int = 0


def _as_pairs(data) -> list:
    if isinstance(data, (list, tuple)):
        return list(data)
    return [data]


def train(data, model: FieldModel, cfg: TrainConfig, loss_cfg: LossConfig = LossConfig(),
          resume: Optional[TrainState] = None, stop_at: Optional[int] = None
          ) -> Tuple[FieldModel, TrainLog]:
    """Optimize ``model`` on one pair (instance mode) or a list of pairs
    (dataset mode, one random pair per step).

    Pairs are anything with ``fixed`` and ``moving`` images.  ``stop_at``
    ends the run early after that many total iterations; the state needed to
    resume is available as ``log.state``.
    """
    pairs = _as_pairs(data)
    if cfg.mode == "instance" and len(pairs) != 1:
        raise ValueError("instance mode takes exactly one pair")
    geom = pairs[0].fixed.geom
    if any(p.fixed.geom != geom or p.moving.geom != geom for p in pairs):
        raise GeometryMismatch("all pairs must share one geometry")
    if cfg.lam is not None:
        loss_cfg = replace(loss_cfg, lam=cfg.lam)

    if resume is None:
        rng = np.random.default_rng(cfg.seed)
        adam = AdamState.zeros(len(model.params))
        start = 0
    else:
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        model, adam, start = resume.model, resume.adam, resume.iteration
    end = cfg.iters if stop_at is None else min(stop_at, cfg.iters)

    log = TrainLog()
    for it in range(start + 1, end + 1):
        tick = time.perf_counter()
        pair = pairs[0] if len(pairs) == 1 else pairs[int(rng.integers(len(pairs)))]
        t = sample_time(cfg.time_mode, rng)
        tape = Tape()
        terms = loss_terms(model, pair.fixed, pair.moving, t, loss_cfg, tape=tape)
        total = float(terms.total)
        if not np.isfinite(total):
            raise NonFiniteLoss(it, total)
        grads = tape.backward(terms.total)
        if not np.all(np.isfinite(grads.values)):
            raise NonFiniteLoss(it, float("nan"))
        adam, params = adam_step(adam, grads, model.params, cfg)
        model = model.with_params(params)
        if it % cfg.log_every == 0 or it == end:
            log.append(it, t, float(terms.sim), float(terms.semigroup), total,
                       1e3 * (time.perf_counter() - tick))
    log.state = TrainState(model, adam, rng.bit_generator.state, end)
    return model, log


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: FieldModel
    adam: AdamState
    rng_state: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    @property
    def state(self) -> TrainState:
        return TrainState(self.model, self.adam, self.rng_state, self.adam.step)


def checkpoint_save(model: FieldModel, adam_state: Optional[AdamState], path,
                    rng_state: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    """Layout: magic, u32 version, u32 header length, UTF-8 JSON header, then
    params, first and second moments as little-endian float64."""
    adam_state = adam_state or AdamState.zeros(len(model.params))
    header = {
        "model": asdict(model.config),
        "embed": asdict(model.embed),
        "layout": [[name, off, list(shape)] for name, (off, shape) in model.params.layout.items()],
        "n_params": len(model.params),
        "step": int(adam_state.step),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in (model.params.values, adam_state.m, adam_state.v):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise UnsupportedCheckpoint(f"bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise UnsupportedCheckpoint("truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise UnsupportedCheckpoint(f"checkpoint version {version} not supported")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UnsupportedCheckpoint(f"unreadable header: {exc}") from None
    n = header["n_params"]
    body = raw[12 + hlen:]
    if len(body) != 3 * 8 * n:
        raise UnsupportedCheckpoint(f"payload has {len(body)} bytes, expected {24 * n}")
    arrays = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(3, n)
    model_cfg = header["model"]
    model_cfg["channels"] = tuple(model_cfg["channels"])
    layout = {name: (off, tuple(shape)) for name, off, shape in header["layout"]}
    model = FieldModel(FieldModelConfig(**model_cfg), TimeEmbeddingConfig(**header["embed"]),
                       ParamVector(arrays[0].copy(), layout))
    adam = AdamState(arrays[1].copy(), arrays[2].copy(), header["step"])
    return Checkpoint(model, adam, header["rng_state"], header["extra"])
