"""Core volumetric types, trilinear sampling and resampling.

A volume is a 3D scalar grid with physical geometry: voxel spacing in mm,
a world-space origin (center of voxel (0,0,0)) and an orthonormal direction
matrix whose columns are the world axes of the voxel axes. Data is stored as
an (nx, ny, nz) array; the serialized layout is x-fastest.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryMismatchError, InvalidInputError

LABEL_CLASS_IDS = (0, 1, 2, 3)
CLASS_NAMES = {1: "lv_cavity", 2: "lv_myocardium", 3: "rv_cavity"}


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(n) <= 0 for n in dims):
        raise InvalidInputError(f"dims must be three positive integers, got {dims}")
    if len(spacing) != 3 or any(not (s > 0) for s in spacing):
        raise InvalidInputError(f"spacings must be strictly positive, got {spacing}")


class _Spatial:
    """Shared world/voxel coordinate mapping for the grid types below."""

    def _freeze_geometry(self):
        _check_geometry(self.dims, self.spacing)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        origin.flags.writeable = False
        object.__setattr__(self, "origin", origin)
        direction = np.asarray(self.direction, dtype=np.float64).copy()
        if direction.shape != (3, 3):
            raise InvalidInputError(f"direction must be 3x3, got {direction.shape}")
        if abs(abs(np.linalg.det(direction)) - 1.0) > 1e-6:
            raise InvalidInputError("direction matrix must be orthonormal (|det| = 1)")
        direction.flags.writeable = False
        object.__setattr__(self, "direction", direction)

    def world_from_voxel(self, pts) -> np.ndarray:
        """Map continuous voxel coordinates (..., 3) to world mm coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts * np.asarray(self.spacing) @ self.direction.T + self.origin

    def voxel_from_world(self, pts) -> np.ndarray:
        """Map world mm coordinates (..., 3) to continuous voxel coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.origin) @ self.direction / np.asarray(self.spacing)

    def same_geometry(self, other, tol: float = 1e-5) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.direction, other.direction, atol=tol)
        )


@dataclass(frozen=True)
class Volume(_Spatial):
    """3D scalar image with physical geometry. Immutable after construction."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise InvalidInputError(f"volume data must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("volume data contains NaN or Inf")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        self._freeze_geometry()

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume(_Spatial):
    """Integer-class grid; 0 background, 1 LV cavity, 2 LV myocardium, 3 RV cavity."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidInputError(f"label data must be 3D, got shape {data.shape}")
        if not np.isin(data, LABEL_CLASS_IDS).all():
            bad = sorted(set(np.unique(data).tolist()) - set(LABEL_CLASS_IDS))
            raise InvalidInputError(f"label volume contains undeclared class ids {bad}")
        data = data.astype(np.uint8)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        self._freeze_geometry()

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ProbabilityVolume(_Spatial):
    """Per-class probability channels; shape (C, nx, ny, nz), per-voxel sum 1."""

    channels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float32)
        if ch.ndim != 4 or ch.shape[0] < 2:
            raise InvalidInputError(f"channels must be (C>=2, nx, ny, nz), got {ch.shape}")
        if ch.min() < -1e-6 or ch.max() > 1 + 1e-6:
            raise InvalidInputError("channel values must lie in [0, 1]")
        sums = ch.sum(axis=0, dtype=np.float64)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise InvalidInputError("per-voxel channel sums must equal 1 within 1e-4")
        ch = ch.copy()
        ch.flags.writeable = False
        object.__setattr__(self, "channels", ch)
        self._freeze_geometry()

    @property
    def num_classes(self) -> int:
        return self.channels.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.channels.shape[1:]


def require_same_geometry(a, b, what: str = "volumes"):
    if not a.same_geometry(b):
        raise GeometryMismatchError(
            f"{what} must share geometry: {a.dims}/{a.spacing} vs {b.dims}/{b.spacing}"
        )


# ---------------------------------------------------------------------------
# Trilinear sampling
# ---------------------------------------------------------------------------

def _trilinear_impl(data, pts, oob, want_gradient):
    data = np.ascontiguousarray(data, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    shape = pts.shape[:-1]
    p = pts.reshape(-1, 3)
    nx, ny, nz = data.shape

    inside = (
        (p[:, 0] >= 0) & (p[:, 0] <= nx - 1)
        & (p[:, 1] >= 0) & (p[:, 1] <= ny - 1)
        & (p[:, 2] >= 0) & (p[:, 2] <= nz - 1)
    )
    i0 = np.clip(np.floor(p[:, 0]).astype(np.intp), 0, max(nx - 2, 0))
    j0 = np.clip(np.floor(p[:, 1]).astype(np.intp), 0, max(ny - 2, 0))
    k0 = np.clip(np.floor(p[:, 2]).astype(np.intp), 0, max(nz - 2, 0))
    fx = np.clip(p[:, 0] - i0, 0.0, 1.0)
    fy = np.clip(p[:, 1] - j0, 0.0, 1.0)
    fz = np.clip(p[:, 2] - k0, 0.0, 1.0)

    flat = data.reshape(-1)
    sx = ny * nz if nx > 1 else 0
    sy = nz if ny > 1 else 0
    sz = 1 if nz > 1 else 0
    base = (i0 * ny + j0) * nz + k0
    c000 = flat.take(base)
    c100 = flat.take(base + sx)
    c010 = flat.take(base + sy)
    c110 = flat.take(base + sx + sy)
    c001 = flat.take(base + sz)
    c101 = flat.take(base + sx + sz)
    c011 = flat.take(base + sy + sz)
    c111 = flat.take(base + sx + sy + sz)

    c00 = c000 + (c100 - c000) * fx
    c01 = c001 + (c101 - c001) * fx
    c10 = c010 + (c110 - c010) * fx
    c11 = c011 + (c111 - c011) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    vals = c0 + (c1 - c0) * fz
    vals = np.where(inside, vals, oob)

    grad = None
    if want_gradient:
        gx = (
            ((c100 - c000) * (1 - fy) + (c110 - c010) * fy) * (1 - fz)
            + ((c101 - c001) * (1 - fy) + (c111 - c011) * fy) * fz
        )
        gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
        gz = c1 - c0
        grad = np.stack([gx, gy, gz], axis=-1)
        grad[~inside] = 0.0
        grad = grad.reshape(shape + (3,))
    return vals.reshape(shape), grad, inside.reshape(shape)


def _trilinear_values(data, pts, oob):
    """Trilinear interpolation of `data` at continuous voxel coords (..., 3)."""
    vals, _, _ = _trilinear_impl(data, pts, oob, want_gradient=False)
    return vals


def _trilinear_with_gradient(data, pts, oob):
    """Values, in-cell spatial gradient (d value / d voxel coord), inside mask."""
    return _trilinear_impl(data, pts, oob, want_gradient=True)


def sample_trilinear(vol: Volume, p, out_of_bounds: float = 0.0):
    """Trilinear sample of a volume at continuous voxel coordinate(s).

    Coordinates outside [0, n-1] on any axis return `out_of_bounds`
    (background padding). Accepts a single 3-vector or an (..., 3) array.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    vals = _trilinear_values(vol.data, p.reshape(-1, 3), out_of_bounds)
    return float(vals[0]) if single else vals.reshape(p.shape[:-1])


def _nearest_values(data, pts, oob):
    """Nearest-neighbor lookup; out-of-bounds points return `oob` (None = clamp)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    nx, ny, nz = data.shape
    idx = np.rint(pts).astype(np.intp)
    inside = (
        (idx[:, 0] >= 0) & (idx[:, 0] <= nx - 1)
        & (idx[:, 1] >= 0) & (idx[:, 1] <= ny - 1)
        & (idx[:, 2] >= 0) & (idx[:, 2] <= nz - 1)
    )
    i = np.clip(idx[:, 0], 0, nx - 1)
    j = np.clip(idx[:, 1], 0, ny - 1)
    k = np.clip(idx[:, 2], 0, nz - 1)
    vals = data[i, j, k]
    if oob is not None:
        vals = np.where(inside, vals, oob)
    return vals


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def _grid_points(dims, step):
    ii, jj, kk = np.meshgrid(
        np.arange(dims[0]) * step[0],
        np.arange(dims[1]) * step[1],
        np.arange(dims[2]) * step[2],
        indexing="ij",
    )
    return np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)


def resample(vol, target_spacing):
    """Resample to a new voxel spacing; origin and direction are preserved.

    Output dims are ceil(n * s_old / s_new) per axis. Intensity volumes are
    sampled trilinearly (background 0 outside the source grid); label volumes
    use clamped nearest-neighbor so no new class id can appear.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(not (s > 0) for s in target_spacing):
        raise InvalidInputError(f"target spacings must be positive, got {target_spacing}")

    old = np.asarray(vol.spacing)
    new = np.asarray(target_spacing)
    new_dims = tuple(int(math.ceil(vol.dims[a] * old[a] / new[a])) for a in range(3))
    pts = _grid_points(new_dims, new / old)

    if isinstance(vol, LabelVolume):
        vals = _nearest_values(vol.data, pts, oob=None)
        return LabelVolume(vals.reshape(new_dims), target_spacing, vol.origin, vol.direction)
    vals = _trilinear_values(vol.data, pts, oob=0.0)
    return Volume(vals.reshape(new_dims).astype(np.float32), target_spacing,
                  vol.origin, vol.direction)
