"""Localized NCC, the semigroup regularizer and the total objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .diff import Node, Tape
from .errors import GeometryMismatch, TimeOutOfRange, WindowTooLarge
from .grid import ScalarImage, identity_coords


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e3
    ncc_window: int = 11
    ncc_eps: float = 1e-5
    norm_mode: str = "rms"

    def __post_init__(self):
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError(f"ncc_window must be odd and >= 3, got {self.ncc_window}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.ncc_eps <= 0:
            raise ValueError("ncc_eps must be positive")
        if self.norm_mode != "rms":
            raise ValueError("only the rms norm is supported")


def trace_sample(tape: Tape, field: Node, coords: Node) -> Node:
    """Clamp-then-interpolate ``field`` (C, *dims) at ``coords`` (rank, *dims)."""
    upper = [d - 1 for d in field.shape[1:]]
    return tape.record("grid_sample", [field, tape.record("clamp_stop", [coords], upper=upper)])


def _identity(tape: Tape, dims) -> Node:
    return tape.constant(identity_coords(dims))


def trace_warp(tape: Tape, image: Node, u: Node) -> Node:
    """Pull-back warp of an image node (shape ``dims``) by displacement ``u``."""
    dims = image.shape
    field = tape.record("reshape", [image], shape=(1,) + dims)
    out = trace_sample(tape, field, _identity(tape, dims) + u)
    return tape.record("reshape", [out], shape=dims)


def trace_compose(tape: Tape, outer: Node, inner: Node) -> Node:
    """Displacement of ``phi_outer o phi_inner``."""
    dims = inner.shape[1:]
    return inner + trace_sample(tape, outer, _identity(tape, dims) + inner)


def trace_rms(tape: Tape, x: Node) -> Node:
    n = x.value.size
    return tape.record("sqrt", [tape.record("sumsq", [x]) / n])


def trace_ncc(tape: Tape, a: Node, b: Node, window: int, eps: float) -> Node:
    """Mean over full windows of the squared zero-normalized cross
    correlation, computed in double precision."""
    if any(d < window for d in a.shape):
        raise WindowTooLarge(f"window {window} exceeds image dims {a.shape}")
    a = tape.record("astype", [a], dtype=np.float64)
    b = tape.record("astype", [b], dtype=np.float64)
    n = float(window ** a.value.ndim)

    def box(x):
        return tape.record("window_sum", [x], window=window)

    sa, sb = box(a), box(b)
    cross = box(a * b) - sa * sb / n
    var_a = box(a * a) - sa * sa / n
    var_b = box(b * b) - sb * sb / n
    cc = cross * cross / (var_a * var_b + eps)
    return tape.record("mean", [cc])


def local_ncc(img_a: ScalarImage, img_b: ScalarImage, cfg: LossConfig = LossConfig()) -> float:
    if img_a.geom != img_b.geom:
        raise GeometryMismatch(f"{img_a.geom} vs {img_b.geom}")
    tape = Tape(np.float64, grad=False)
    return float(trace_ncc(tape, tape.constant(img_a.values), tape.constant(img_b.values),
                           cfg.ncc_window, cfg.ncc_eps))


class LossTerms(NamedTuple):
    total: Node
    sim: Node
    semigroup: Node


def _check_t(t):
    if not 0 <= t <= 1:
        raise TimeOutOfRange(f"t={t} outside [0, 1]")


def _sim_term(tape, fixed, moving, u_prev, u_t, cfg):
    warped_fixed = trace_warp(tape, tape.constant(fixed.values), u_prev)
    warped_moving = trace_warp(tape, tape.constant(moving.values), u_t)
    return -trace_ncc(tape, warped_fixed, warped_moving, cfg.ncc_window, cfg.ncc_eps)


def _semigroup_term(tape, u_a, u_b, u_c):
    return (trace_rms(tape, u_c - trace_compose(tape, u_a, u_b))
            + trace_rms(tape, u_c - trace_compose(tape, u_b, u_a)))


def sim_loss(m, fixed: ScalarImage, moving: ScalarImage, t: float, cfg: LossConfig = LossConfig(),
             tape: Optional[Tape] = None) -> Node:
    """``-NCC(phi_{t-1}[I_f], phi_t[I_m])``.  ``m`` is anything with a
    ``trace_deformation(tape, fixed, moving, t)`` method."""
    _check_t(t)
    tape = Tape(grad=False) if tape is None else tape
    u_prev = m.trace_deformation(tape, fixed, moving, t - 1)
    u_t = m.trace_deformation(tape, fixed, moving, t)
    return _sim_term(tape, fixed, moving, u_prev, u_t, cfg)


def semigroup_loss(m, fixed: ScalarImage, moving: ScalarImage, t: float,
                   tape: Optional[Tape] = None) -> Node:
    """``RMS(u_{2t-1} - u_t o u_{t-1}) + RMS(u_{2t-1} - u_{t-1} o u_t)``."""
    _check_t(t)
    tape = Tape(grad=False) if tape is None else tape
    u_a = m.trace_deformation(tape, fixed, moving, t)
    u_b = m.trace_deformation(tape, fixed, moving, t - 1)
    u_c = m.trace_deformation(tape, fixed, moving, 2 * t - 1)
    return _semigroup_term(tape, u_a, u_b, u_c)


def loss_terms(m, fixed: ScalarImage, moving: ScalarImage, t: float, cfg: LossConfig = LossConfig(),
               tape: Optional[Tape] = None) -> LossTerms:
    """All three terms from exactly three deformation evaluations."""
    _check_t(t)
    tape = Tape(grad=False) if tape is None else tape
    u_t = m.trace_deformation(tape, fixed, moving, t)
    u_prev = m.trace_deformation(tape, fixed, moving, t - 1)
    u_c = m.trace_deformation(tape, fixed, moving, 2 * t - 1)
    sim = _sim_term(tape, fixed, moving, u_prev, u_t, cfg)
    sg = _semigroup_term(tape, u_t, u_prev, u_c)
    total = sim + sg * cfg.lam if cfg.lam else sim
    return LossTerms(total, sim, sg)


def total_loss(m, fixed: ScalarImage, moving: ScalarImage, t: float, cfg: LossConfig = LossConfig(),
               tape: Optional[Tape] = None) -> Node:
    return loss_terms(m, fixed, moving, t, cfg, tape).total
