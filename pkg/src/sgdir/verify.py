"""Numeric checks of the flow-map algebra on a trained model.

All residuals are voxel RMS over the interior (a 2-voxel shell is dropped).
Deformations are evaluated in double precision and cached per time value.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import TimeOutOfRange
from .grid import DisplacementField, compose, interior_mask, rms, warp_labels
from .metrics import dice, pct_neg_jac
from .model import deformation_at

SHELL = 2


class _Flow:
    """Memoized ``t -> u_t`` for one model and pair."""

    def __init__(self, m, pair):
        self.m, self.pair = m, pair
        self.cache: Dict[float, DisplacementField] = {}
        self.mask = interior_mask(pair.fixed.geom.dims, SHELL)

    def __call__(self, t: float) -> DisplacementField:
        t = float(t)
        if not -1.0 <= t <= 1.0:
            raise TimeOutOfRange(f"t={t} outside [-1, 1]")
        if t not in self.cache:
            self.cache[t] = deformation_at(self.m, self.pair.fixed, self.pair.moving, t, dtype=np.float64)
        return self.cache[t]

    def rms(self, vectors) -> float:
        return rms(vectors, self.mask)


def default_samples(n: int = 25, seed: int = 0) -> List[Tuple[float, float]]:
    """``n`` pairs drawn uniformly from ``{(t, s) in [-1,1]^2 : |t+s| <= 1}``
    by rejection."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        t, s = rng.uniform(-1.0, 1.0, 2)
        if abs(t + s) <= 1.0:
            out.append((float(t), float(s)))
    return out


def semigroup_residual(m, pair, samples: Optional[Sequence[Tuple[float, float]]] = None,
                       _flow: Optional[_Flow] = None) -> Dict[Tuple[float, float], float]:
    """``RMS(u_{t+s} - u_t o u_s)`` for every ``(t, s)``."""
    samples = default_samples() if samples is None else samples
    for t, s in samples:
        if max(abs(t), abs(s), abs(t + s)) > 1:
            raise TimeOutOfRange(f"(t, s) = ({t}, {s}) leaves [-1, 1]")
    flow = _flow or _Flow(m, pair)
    return {(t, s): flow.rms(flow(t + s).vectors - compose(flow(t), flow(s)).vectors)
            for t, s in samples}


def inverse_consistency(m, pair, ts: Iterable[float] = (0.25, 0.5, 0.75, 1.0),
                        _flow: Optional[_Flow] = None) -> Dict[float, Tuple[float, float]]:
    """Per ``t``: distance to identity of ``phi_t o phi_-t`` and of
    ``phi_-t o phi_t``."""
    ts = list(ts)
    if any(not 0 <= t <= 1 for t in ts):
        raise TimeOutOfRange("inverse consistency times must lie in [0, 1]")
    flow = _flow or _Flow(m, pair)
    return {t: (flow.rms(compose(flow(t), flow(-t)).vectors),
                flow.rms(compose(flow(-t), flow(t)).vectors)) for t in ts}


def tree_leaves(n: int, s: float = 0.0) -> List[float]:
    """Leaf times of the depth-``n`` binary expansion
    ``phi_s = phi_{(s+1)/2} o phi_{(s-1)/2}``, outermost first."""
    if n == 0:
        return [s]
    return tree_leaves(n - 1, (s + 1) / 2) + tree_leaves(n - 1, (s - 1) / 2)


def tree_residual(m, pair, n: int, _flow: Optional[_Flow] = None) -> float:
    """Distance to identity of the ``2**n`` factor expansion of ``phi_0``,
    composed left to right."""
    if not 1 <= n <= 4:
        raise ValueError(f"tree depth must be in 1..4, got {n}")
    flow = _flow or _Flow(m, pair)
    leaves = tree_leaves(n)
    acc = flow(leaves[0])
    for t in leaves[1:]:
        acc = compose(acc, flow(t))
    return flow.rms(acc.vectors)


def jac_through_time(m, pair, t_grid: Sequence[float], labels: bool = True,
                     _flow: Optional[_Flow] = None) -> Dict[float, Tuple[float, Optional[float]]]:
    """Per ``t``: percentage of non-positive Jacobians of ``u_t`` and, with
    labels, the Dice of the warped pair.  For ``t >= 0`` the moving labels are
    pulled towards the fixed ones; for ``t < 0`` the fixed labels are pulled
    back towards the moving ones."""
    flow = _flow or _Flow(m, pair)
    out = {}
    for t in t_grid:
        u = flow(t)
        d = None
        if labels and getattr(pair, "labels_fixed", None) is not None:
            if t >= 0:
                d = dice(warp_labels(pair.labels_moving, u), pair.labels_fixed)[0]
            else:
                d = dice(warp_labels(pair.labels_fixed, u), pair.labels_moving)[0]
        out[float(t)] = (pct_neg_jac(u), d)
    return out


def default_t_grid(points: int = 17) -> List[float]:
    return [float(x) for x in np.linspace(-1.0, 1.0, points)]


REPORT_HEADER = ("check", "t", "s", "n", "value", "dice")


@dataclass
class FlowReport:
    semigroup_rms: Dict[Tuple[float, float], float] = field(default_factory=dict)
    inverse_rms: Dict[float, Tuple[float, float]] = field(default_factory=dict)
    tree_residual: Dict[int, float] = field(default_factory=dict)
    jac_curve: Dict[float, Tuple[float, Optional[float]]] = field(default_factory=dict)

    def rows(self) -> List[list]:
        """One row per sample point, in the fixed column order of
        ``REPORT_HEADER``; unused cells are empty."""
        f = repr
        rows = [["semigroup", f(t), f(s), "", f(v), ""] for (t, s), v in self.semigroup_rms.items()]
        for t, (a, b) in self.inverse_rms.items():
            rows.append(["inverse_fwd", f(float(t)), "", "", f(a), ""])
            rows.append(["inverse_bwd", f(float(t)), "", "", f(b), ""])
        rows += [["tree", "", "", str(n), f(v), ""] for n, v in self.tree_residual.items()]
        rows += [["neg_jacobian", f(t), "", "", f(p), "" if d is None else f(d)]
                 for t, (p, d) in self.jac_curve.items()]
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            w.writerows(self.rows())


def flow_report(m, pair, samples=None, ts=(0.25, 0.5, 0.75, 1.0), depths=(1, 2, 3),
                t_grid=None) -> FlowReport:
    flow = _Flow(m, pair)
    return FlowReport(
        semigroup_residual(m, pair, samples, _flow=flow),
        inverse_consistency(m, pair, ts, _flow=flow),
        {n: tree_residual(m, pair, n, _flow=flow) for n in depths},
        jac_through_time(m, pair, default_t_grid() if t_grid is None else t_grid, _flow=flow),
    )
