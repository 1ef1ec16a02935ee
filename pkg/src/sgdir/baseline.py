"""Stationary velocity fields: scaling-and-squaring, an RK4 trajectory
integrator used as the reference flow, and a minimal SVF registration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diff import Tape
from .errors import GeometryMismatch
from .grid import (DisplacementField, GridGeometry, ScalarImage, compose, identity_coords,
                   interpolate)
from .loss import trace_compose, trace_ncc, trace_warp
from .train import AdamState, adam_update


@dataclass
class StationaryVelocityField:
    geom: GridGeometry
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.shape != (self.geom.rank,) + self.geom.dims:
            raise ValueError(f"vectors shape {self.vectors.shape} does not match {self.geom}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("velocity must be finite")

    @classmethod
    def from_array(cls, vectors, spacing=None) -> "StationaryVelocityField":
        vectors = np.asarray(vectors)
        return cls(GridGeometry(vectors.shape[1:], spacing), vectors)


def scaling_squaring(v: StationaryVelocityField, n: int = 8) -> DisplacementField:
    if n < 1:
        raise ValueError("N must be >= 1")
    u = DisplacementField(v.geom, v.vectors / 2.0 ** n)
    for _ in range(n):
        u = compose(u, u)
    return u


def integrate_points(v: StationaryVelocityField, points, t_end: float = 1.0, steps: int = 256) -> np.ndarray:
    """Classical RK4 on the trajectories ``dx/dt = v(x)`` starting at
    ``points`` (rank, ...); returns the end points."""
    if steps < 16:
        raise ValueError("steps must be >= 16")
    field = np.asarray(v.vectors, dtype=np.float64)
    x = np.array(points, dtype=np.float64)
    if t_end == 0:
        return x
    h = t_end / steps
    for _ in range(steps):
        k1 = interpolate(field, x)
        k2 = interpolate(field, x + 0.5 * h * k1)
        k3 = interpolate(field, x + 0.5 * h * k2)
        k4 = interpolate(field, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def integrate_exact(v: StationaryVelocityField, t_end: float = 1.0, steps: int = 256) -> DisplacementField:
    """RK4 trajectory of every grid point, as a displacement field."""
    x0 = identity_coords(v.geom.dims)
    return DisplacementField(v.geom, integrate_points(v, x0, t_end, steps) - x0)


@dataclass(frozen=True)
class SvfConfig:
    lambda_smooth: float = 0.1
    iters: int = 200
    lr: float = 0.1
    n: int = 8


def _trace_smoothness(tape, v):
    """Mean squared forward-difference gradient of every component."""
    total = None
    for axis in range(1, v.value.ndim):
        d = tape.record("forward_diff", [v], axis=axis)
        term = tape.record("sumsq", [d]) / d.value.size
        total = term if total is None else total + term
    return total


def _trace_svf_objective(tape, v, fixed, moving, cfg, window):
    u = v / 2.0 ** cfg.n
    for _ in range(cfg.n):
        u = trace_compose(tape, u, u)
    warped = trace_warp(tape, tape.constant(moving.values), u)
    sim = -trace_ncc(tape, warped, tape.constant(fixed.values), window, 1e-5)
    if cfg.lambda_smooth:
        return sim + _trace_smoothness(tape, v) * cfg.lambda_smooth
    return sim


def svf_register(fixed: ScalarImage, moving: ScalarImage, cfg: SvfConfig = SvfConfig(),
                 window: int = 11) -> StationaryVelocityField:
    """Fit a per-voxel velocity so that ``moving`` pulled back through
    ``exp(v)`` matches ``fixed`` (Adam on the voxel values)."""
    if fixed.geom != moving.geom:
        raise GeometryMismatch(f"{fixed.geom} vs {moving.geom}")
    v = np.zeros((fixed.geom.rank,) + fixed.geom.dims)
    state = AdamState.zeros(v.size)
    for _ in range(cfg.iters):
        tape = Tape()
        leaf = tape.leaf(v)
        loss = _trace_svf_objective(tape, leaf, fixed, moving, cfg, window)
        (grad,) = tape.backward(loss, wrt=[leaf])
        state, flat = adam_update(state, grad.ravel().astype(np.float64), v.ravel(), cfg.lr)
        v = flat.reshape(v.shape)
    return StationaryVelocityField(fixed.geom, v)
