"""Regular grids, images, displacement fields and the interpolation kernels.

All deformations are stored as displacements ``u`` (voxel units) with
``phi(x) = x + u(x)``.  Warping is pull-back: ``W(x) = I(phi(x))``.
Sampling clamps coordinates to the grid (border replicate).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import GeometryMismatch, InvalidCoordinate, ShapeError


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple
    spacing: tuple = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3):
            raise ShapeError(f"rank must be 2 or 3, got {len(dims)}")
        if min(dims) < 4:
            raise ShapeError(f"every dim must be >= 4, got {dims}")
        spacing = self.spacing
        spacing = (1.0,) * len(dims) if spacing is None else tuple(float(s) for s in spacing)
        if len(spacing) != len(dims) or min(spacing) <= 0:
            raise ShapeError(f"invalid spacing {spacing} for dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))


def _check_same(a: GridGeometry, b: GridGeometry) -> None:
    if a.dims != b.dims or a.spacing != b.spacing:
        raise GeometryMismatch(f"{a} vs {b}")


@dataclass
class ScalarImage:
    geom: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != self.geom.dims:
            raise ShapeError(f"values shape {self.values.shape} != dims {self.geom.dims}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image values must be finite")

    @classmethod
    def from_array(cls, values, spacing=None) -> "ScalarImage":
        values = np.asarray(values)
        return cls(GridGeometry(values.shape, spacing), values)

    def normalized(self) -> "ScalarImage":
        """Min-max rescale to [0, 1]; constant images map to zeros."""
        v = self.values.astype(np.float64)
        lo, hi = v.min(), v.max()
        out = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
        return ScalarImage(self.geom, out.astype(np.float32))


@dataclass
class LabelMap:
    geom: GridGeometry
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.shape != self.geom.dims:
            raise ShapeError(f"labels shape {self.labels.shape} != dims {self.geom.dims}")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    @classmethod
    def from_array(cls, labels, spacing=None) -> "LabelMap":
        labels = np.asarray(labels)
        return cls(GridGeometry(labels.shape, spacing), labels)


@dataclass
class DisplacementField:
    geom: GridGeometry
    vectors: np.ndarray
    time_tag: Optional[float] = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        expected = (self.geom.rank,) + self.geom.dims
        if self.vectors.shape != expected:
            raise ShapeError(f"vectors shape {self.vectors.shape} != {expected}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("displacement components must be finite")

    @classmethod
    def zeros(cls, geom: GridGeometry, dtype=np.float32) -> "DisplacementField":
        return cls(geom, np.zeros((geom.rank,) + geom.dims, dtype=dtype))

    @classmethod
    def from_array(cls, vectors, spacing=None, time_tag=None) -> "DisplacementField":
        vectors = np.asarray(vectors)
        return cls(GridGeometry(vectors.shape[1:], spacing), vectors, time_tag)


@dataclass
class LandmarkSet:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(len(self.points), -1)

    def __len__(self):
        return len(self.points)

    def check_inside(self, geom: GridGeometry) -> None:
        upper = np.asarray(geom.dims) - 1
        if np.any(self.points < 0) or np.any(self.points > upper):
            raise InvalidCoordinate("landmark outside grid bounds")


def identity_coords(dims: Sequence[int], dtype=np.float64) -> np.ndarray:
    """Voxel coordinates of every grid point, shape ``(rank, *dims)``."""
    return np.stack(np.meshgrid(*[np.arange(d, dtype=dtype) for d in dims], indexing="ij"))


def linear_stencil(coords: np.ndarray, dims: Sequence[int]):
    """Clamp ``coords`` (shape ``(rank, ...)``) into the grid and split them
    into base index and fractional offset per axis.

    Returns ``(base, frac, inside)`` where ``inside`` flags coordinates that
    needed no clamping.
    """
    rank = len(dims)
    upper = np.asarray(dims, dtype=coords.dtype).reshape((rank,) + (1,) * (coords.ndim - 1)) - 1
    inside = (coords >= 0) & (coords <= upper)
    clamped = np.clip(coords, 0, upper)
    base = np.minimum(np.floor(clamped).astype(np.int64), upper.astype(np.int64) - 1)
    frac = (clamped - base).astype(coords.dtype)
    return base, frac, inside


def corner_offsets(rank: int):
    return list(itertools.product((0, 1), repeat=rank))


def flat_strides(dims: Sequence[int]) -> np.ndarray:
    # row-major, last axis fastest
    return np.array([int(np.prod(dims[a + 1:])) for a in range(len(dims))], dtype=np.int64)


def interpolate(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a multichannel grid.

    ``values`` has shape ``(C, *dims)``; ``coords`` has shape ``(rank, *out)``.
    Returns ``(C, *out)``.
    """
    dims = values.shape[1:]
    rank = len(dims)
    if coords.shape[0] != rank:
        raise ShapeError(f"coords need {rank} components, got {coords.shape[0]}")
    base, frac, _ = linear_stencil(coords, dims)
    strides = flat_strides(dims)
    flat = values.reshape(values.shape[0], -1)
    out = np.zeros((values.shape[0],) + coords.shape[1:], dtype=np.result_type(values, frac))
    for corner in corner_offsets(rank):
        idx = np.zeros(coords.shape[1:], dtype=np.int64)
        w = np.ones(coords.shape[1:], dtype=frac.dtype)
        for a, bit in enumerate(corner):
            idx += (base[a] + bit) * strides[a]
            w = w * (frac[a] if bit else 1 - frac[a])
        out += flat[:, idx] * w
    return out


def sample_scalar(img: ScalarImage, coords) -> float:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (img.geom.rank,):
        raise InvalidCoordinate(f"expected {img.geom.rank} coordinates, got shape {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise InvalidCoordinate(f"non-finite coordinate {coords}")
    return float(interpolate(img.values[None].astype(np.float64), coords[:, None])[0, 0])


def sample_vector(u: DisplacementField, coords: np.ndarray) -> np.ndarray:
    """Interpolate ``u`` at an array of coordinates ``(rank, ...)``."""
    coords = np.asarray(coords)
    if not np.all(np.isfinite(coords)):
        raise InvalidCoordinate("non-finite coordinates")
    return interpolate(u.vectors, coords)


def deformed_coords(u: DisplacementField) -> np.ndarray:
    return identity_coords(u.geom.dims, dtype=u.vectors.dtype) + u.vectors


def warp_image(img: ScalarImage, u: DisplacementField) -> ScalarImage:
    _check_same(img.geom, u.geom)
    if not np.any(u.vectors):
        return ScalarImage(img.geom, img.values.copy())
    out = interpolate(img.values[None], deformed_coords(u))[0]
    return ScalarImage(img.geom, out.astype(img.values.dtype, copy=False))


def warp_labels(labels: LabelMap, u: DisplacementField) -> LabelMap:
    """Nearest-neighbour pull-back of a label map; labels are never blended."""
    _check_same(labels.geom, u.geom)
    dims = labels.geom.dims
    coords = deformed_coords(u).astype(np.float64)
    upper = (np.asarray(dims) - 1).reshape((len(dims),) + (1,) * len(dims))
    # round half up so the rule is explicit rather than banker's rounding
    idx = np.floor(np.clip(coords, 0, upper) + 0.5).astype(np.int64)
    idx = np.minimum(idx, upper)
    return LabelMap(labels.geom, labels.labels[tuple(idx)])


def compose(u_outer: DisplacementField, u_inner: DisplacementField) -> DisplacementField:
    """Displacement of ``phi_outer o phi_inner``:
    ``w(x) = u_inner(x) + u_outer(x + u_inner(x))``."""
    _check_same(u_outer.geom, u_inner.geom)
    sampled = interpolate(u_outer.vectors, deformed_coords(u_inner))
    vectors = (u_inner.vectors + sampled).astype(np.result_type(u_outer.vectors, u_inner.vectors))
    return DisplacementField(u_outer.geom, vectors)


def jacobian_matrix(u: DisplacementField) -> np.ndarray:
    """``I + grad u`` per voxel, shape ``(rank, rank, *dims)``; central
    differences inside, one-sided at the boundary."""
    rank = u.geom.rank
    v = u.vectors.astype(np.float64)
    jac = np.empty((rank, rank) + u.geom.dims)
    for i in range(rank):
        for j in range(rank):
            jac[i, j] = np.gradient(v[i], axis=j, edge_order=1) + (1.0 if i == j else 0.0)
    return jac


def jacobian_det(u: DisplacementField) -> ScalarImage:
    if min(u.geom.dims) < 3:
        raise ShapeError("jacobian_det needs at least 3 voxels per axis")
    j = jacobian_matrix(u)
    if u.geom.rank == 2:
        det = j[0, 0] * j[1, 1] - j[0, 1] * j[1, 0]
    else:
        det = (j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
               - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
               + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0]))
    return ScalarImage(u.geom, det)


def interior_mask(dims: Sequence[int], shell: int = 2) -> np.ndarray:
    mask = np.zeros(tuple(dims), dtype=bool)
    mask[tuple(slice(shell, d - shell) for d in dims)] = True
    return mask


def rms(vectors: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Root mean square over voxels and components, optionally restricted
    to voxels where ``mask`` is true."""
    v = np.asarray(vectors, dtype=np.float64)
    if mask is not None:
        v = v[:, mask]
    return float(np.sqrt(np.mean(v * v)))
