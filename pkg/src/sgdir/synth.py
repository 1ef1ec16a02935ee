"""Synthetic phantoms and ground-truth diffeomorphic pairs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .baseline import StationaryVelocityField, integrate_exact, integrate_points
from .errors import GeometryMismatch
from .grid import (DisplacementField, GridGeometry, LabelMap, LandmarkSet, ScalarImage,
                   identity_coords, warp_image, warp_labels)

PHANTOM_KINDS = ("rings", "blobs", "checker-soft")


@dataclass(frozen=True)
class SynthConfig:
    dims: Tuple[int, ...] = (64, 64)
    smooth_sigma: float = 6.0
    amplitude: float = 4.0
    n_pairs: int = 1
    seed: int = 0
    phantom_kind: str = "rings"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.smooth_sigma <= 0:
            raise ValueError("smooth_sigma must be > 0")
        if self.phantom_kind not in PHANTOM_KINDS:
            raise ValueError(f"phantom_kind must be one of {PHANTOM_KINDS}, got {self.phantom_kind!r}")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")


@dataclass
class SynthPair:
    fixed: ScalarImage
    moving: ScalarImage
    labels_fixed: LabelMap
    labels_moving: LabelMap
    landmarks_fixed: LandmarkSet
    landmarks_moving: LandmarkSet
    gt_forward: DisplacementField

    def __post_init__(self):
        geoms = {self.fixed.geom, self.moving.geom, self.labels_fixed.geom,
                 self.labels_moving.geom, self.gt_forward.geom}
        if len(geoms) != 1:
            raise GeometryMismatch("all members of a pair must share one geometry")
        if len(self.landmarks_fixed) != len(self.landmarks_moving):
            raise ValueError("landmark lists differ in length")


def _shell_taper(dims: Sequence[int], axis: int, shell: int, width: float) -> np.ndarray:
    """1 in the interior, 0 on the outermost ``shell`` layers of ``axis``,
    with a smooth sin^2 ramp in between."""
    n = dims[axis]
    pos = np.arange(n, dtype=np.float64)
    dist = np.minimum(pos, n - 1 - pos) - (shell - 1)
    ramp = np.clip(dist / width, 0.0, 1.0)
    profile = np.sin(0.5 * np.pi * ramp) ** 2
    shape = [1] * len(dims)
    shape[axis] = n
    return profile.reshape(shape)


def random_svf(dims: Sequence[int], sigma: float = 6.0, amplitude: float = 4.0,
               seed: int = 0) -> StationaryVelocityField:
    """Blurred white noise rescaled to a maximum speed of ``amplitude``.

    The component normal to each face is tapered to zero on the two
    outermost voxel shells so trajectories stay inside the grid.
    """
    dims = tuple(int(d) for d in dims)
    geom = GridGeometry(dims)
    if amplitude == 0:
        return StationaryVelocityField(geom, np.zeros((len(dims),) + dims))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((len(dims),) + dims)
    v = np.stack([gaussian_filter(c, sigma, mode="reflect") for c in noise])
    for axis in range(len(dims)):
        v[axis] *= _shell_taper(dims, axis, shell=2, width=sigma)
    peak = np.sqrt((v ** 2).sum(axis=0)).max()
    return StationaryVelocityField(geom, v * (amplitude / peak))


def _texture(dims, rng, sigma=3.0, amp=0.15):
    t = gaussian_filter(rng.standard_normal(dims), sigma)
    return amp * t / (np.abs(t).max() + 1e-12)


def _rings(dims, rng):
    rank = len(dims)
    center = np.asarray(dims, dtype=np.float64) / 2 - 0.5 + rng.uniform(-1.5, 1.5, rank)
    axes = rng.uniform(0.9, 1.1, rank)
    x = identity_coords(dims)
    r = np.sqrt(sum(((x[a] - center[a]) / axes[a]) ** 2 for a in range(rank)))
    outer = 0.38 * min(dims)
    edges = outer * np.array([0.25, 0.5, 0.75, 1.0])
    labels = np.zeros(dims, dtype=np.int64)
    for k in range(3, -1, -1):
        labels[r < edges[k]] = k + 1
    levels = np.array([0.45, 0.95, 0.25, 0.75, 0.1])  # background, rings 1..4
    intensity = levels[labels]
    # landmarks on the outer boundary of every ring, evenly spread in angle
    points = []
    per_ring = 4 if rank == 2 else 6
    for k, radius in enumerate(edges):
        for j in range(per_ring):
            direction = _direction(rank, j, per_ring, phase=0.3 * k)
            points.append(center + radius * axes * direction)
    return intensity, labels, np.asarray(points)


def _direction(rank, j, count, phase):
    if rank == 2:
        ang = 2 * np.pi * j / count + phase
        return np.array([np.cos(ang), np.sin(ang)])
    dirs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)
    c, s = np.cos(phase), np.sin(phase)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return rot @ dirs[j % 6]


def _blobs(dims, rng):
    rank = len(dims)
    x = identity_coords(dims)
    labels = np.zeros(dims, dtype=np.int64)
    intensity = np.full(dims, 0.4)
    points = []
    lo, hi = 0.25 * np.asarray(dims), 0.75 * np.asarray(dims)
    quadrant = [np.array(q) for q in np.ndindex(*(2,) * rank)][:4]
    for k in range(4):
        c = lo + (hi - lo) * (0.25 + 0.5 * quadrant[k]) + rng.uniform(-1.5, 1.5, rank)
        radius = 0.12 * min(dims) * rng.uniform(0.85, 1.15)
        d = np.sqrt(sum((x[a] - c[a]) ** 2 for a in range(rank)))
        inside = d < radius
        labels[inside] = k + 1
        intensity[inside] = [0.9, 0.1, 0.7, 0.2][k]
        for j in range(4):
            points.append(c + radius * _direction(rank, j, 4, phase=0.4 * k))
    return intensity, labels, np.asarray(points)


def _checker(dims, rng):
    rank = len(dims)
    x = identity_coords(dims)
    period = max(d // 4 for d in dims)
    offset = rng.uniform(0, 2, rank)
    cells = [np.floor((x[a] + offset[a]) / period).astype(np.int64) for a in range(rank)]
    labels = 1 + (sum(cells[a] * (2 ** a) for a in range(min(rank, 2))) % 4)
    intensity = np.array([0.0, 0.15, 0.85, 0.4, 0.6])[labels]
    points = []
    for i in range(1, 5):
        for j in range(1, 5):
            p = np.full(rank, dims[-1] / 2.0)
            p[0] = i * period - offset[0] - 0.5
            p[1] = j * period - offset[1] - 0.5 + 0.5 * period
            points.append(p)
    return intensity, labels, np.clip(np.asarray(points), 2, np.asarray(dims) - 3)


def phantom(kind: str, dims: Sequence[int], seed: int = 0) -> Tuple[ScalarImage, LabelMap, LandmarkSet]:
    """Smooth multi-structure test image with labels and boundary landmarks.

    A low-amplitude smooth texture covers the whole grid so that every
    correlation window carries some signal.
    """
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    builders = {"rings": _rings, "blobs": _blobs, "checker-soft": _checker}
    if kind not in builders:
        raise ValueError(f"unknown phantom kind {kind!r}")
    intensity, labels, points = builders[kind](dims, rng)
    values = gaussian_filter(intensity, 1.0) + _texture(dims, rng)
    geom = GridGeometry(dims)
    img = ScalarImage(geom, values).normalized()
    landmarks = LandmarkSet(points)
    landmarks.check_inside(geom)
    return img, LabelMap(geom, labels), landmarks


def make_pair(base: Tuple[ScalarImage, LabelMap, LandmarkSet], v: StationaryVelocityField,
              steps: int = 256) -> SynthPair:
    """The moving image is ``base``; the fixed image is its pull-back through
    ``phi_1 = exp(v)`` so a registration recovering ``u ~ gt_forward`` maps
    moving onto fixed."""
    image, labels, landmarks = base
    if image.geom.dims != v.geom.dims or labels.geom != image.geom:
        raise GeometryMismatch("base and velocity must share a geometry")
    gt = integrate_exact(v, 1.0, steps)
    gt = DisplacementField(image.geom, gt.vectors.astype(np.float32))
    # landmarks follow the inverse flow along their own trajectories
    mapped = integrate_points(v, landmarks.points.T, -1.0, steps)
    return SynthPair(
        fixed=warp_image(image, gt),
        moving=image,
        labels_fixed=warp_labels(labels, gt),
        labels_moving=labels,
        landmarks_fixed=LandmarkSet(mapped.T),
        landmarks_moving=landmarks,
        gt_forward=gt,
    )


def make_dataset(cfg: SynthConfig) -> list:
    """``cfg.n_pairs`` pairs; pair ``i`` uses phantom seed ``seed + i`` and
    velocity seed ``seed + 1000 + i``."""
    pairs = []
    for i in range(cfg.n_pairs):
        base = phantom(cfg.phantom_kind, cfg.dims, cfg.seed + i)
        v = random_svf(cfg.dims, cfg.smooth_sigma, cfg.amplitude, cfg.seed + 1000 + i)
        pairs.append(make_pair(base, v))
    return pairs
