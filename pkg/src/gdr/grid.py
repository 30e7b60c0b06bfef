"""Regular-grid geometry, scalar/vector fields and finite-difference operators.

Conventions used throughout the package:

* A grid has 1 to 3 axes. Axis 0 is x, axis 1 is y, axis 2 is z. Values are
  stored in numpy arrays of shape ``dims`` (scalar) or ``dims + (d,)``
  (vector). In serialized payloads the first axis varies fastest
  (Fortran ravel order).
* Voxel ``i`` sits at the physical position ``origin + i * spacing`` (mm).
  The physical extent of a grid is cell-based: ``dims * spacing``.
* Deformations are stored as displacement-from-identity in mm, i.e. the map
  is ``x -> x + u(x)``. Identity is the zero field.
* Interpolation is multilinear with clamp-to-edge: sample positions outside
  the domain are clamped to the boundary voxel centers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class GridError(ValueError):
    """Invalid geometry, mismatched fields or out-of-contract arguments."""


@dataclass(frozen=True)
class GridGeometry:
    """Dims/spacing/origin of a regular grid (1-3 axes)."""

    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        if not 1 <= len(dims) <= 3:
            raise GridError(f"grids must have 1-3 axes, got {len(dims)}")
        if len(spacing) != len(dims) or len(origin) != len(dims):
            raise GridError("dims, spacing and origin must have equal length")
        if any(n < 2 for n in dims):
            raise GridError(f"all dims must be >= 2, got {dims}")
        if any(s <= 0 for s in spacing):
            raise GridError(f"all spacings must be > 0, got {spacing}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def extent(self) -> tuple[float, ...]:
        """Cell-based physical extent per axis (mm)."""
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    def axis_coordinates(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])


@lru_cache(maxsize=64)
def _cached_positions(geometry: GridGeometry) -> np.ndarray:
    axes = [geometry.axis_coordinates(k) for k in range(geometry.ndim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pos = np.stack(mesh, axis=-1)
    pos.setflags(write=False)
    return pos


def identity_positions(geometry: GridGeometry) -> np.ndarray:
    """Voxel-center positions in mm, shape ``dims + (d,)`` (read-only)."""
    return _cached_positions(geometry)


def _as_values(values, shape, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != shape:
        raise GridError(f"{what} values have shape {arr.shape}, expected {shape}")
    return arr


@dataclass
class ScalarGrid:
    """One real value per voxel on a :class:`GridGeometry`."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        self.values = _as_values(self.values, self.geometry.dims, "scalar grid")

    def check_finite(self, what: str = "scalar grid") -> "ScalarGrid":
        if not np.all(np.isfinite(self.values)):
            raise GridError(f"{what} contains non-finite values")
        return self

    @classmethod
    def full(cls, geometry: GridGeometry, value: float = 0.0) -> "ScalarGrid":
        return cls(geometry, np.full(geometry.dims, float(value)))


@dataclass
class VectorGrid:
    """One real d-vector per voxel; used for velocities and displacements."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        shape = self.geometry.dims + (self.geometry.ndim,)
        self.values = _as_values(self.values, shape, "vector grid")

    def check_finite(self, what: str = "vector grid") -> "VectorGrid":
        if not np.all(np.isfinite(self.values)):
            raise GridError(f"{what} contains non-finite values")
        return self

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "VectorGrid":
        return cls(geometry, np.zeros(geometry.dims + (geometry.ndim,)))


@dataclass
class LandmarkSet:
    """Point positions in mm; ``paired`` marks correspondence with a twin set."""

    points: np.ndarray
    paired: bool = False

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))

    def __len__(self) -> int:
        return self.points.shape[0]

    def check_inside(self, geometry: GridGeometry) -> "LandmarkSet":
        lo = np.asarray(geometry.origin)
        hi = lo + np.asarray(geometry.extent)
        if np.any(self.points < lo) or np.any(self.points > hi):
            raise GridError("landmarks outside the grid's physical extent")
        return self


def same_geometry(a, b, what: str = "operands") -> None:
    if a.geometry != b.geometry:
        raise GridError(f"{what} live on different geometries")


# ---------------------------------------------------------------------------
# interpolation (gather) and its exact transpose (splat)

def _corner_index_weights(geometry: GridGeometry, points: np.ndarray):
    """Per-axis lower corner indices and fractional weights for multilinear
    interpolation at ``points`` (mm), with clamp-to-edge semantics."""
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != geometry.ndim:
        raise GridError(
            f"points have {pts.shape[-1]} components, grid has {geometry.ndim} axes"
        )
    lows, fracs = [], []
    for k in range(geometry.ndim):
        idx = (pts[..., k] - geometry.origin[k]) / geometry.spacing[k]
        # voxel centers must interpolate exactly even when spacing is not
        # representable in binary; snap away sub-1e-9 index dust
        snapped = np.round(idx)
        idx = np.where(np.abs(idx - snapped) < 1e-9, snapped, idx)
        idx = np.clip(idx, 0.0, geometry.dims[k] - 1.0)
        low = np.floor(idx)
        # keep the upper corner in range: at the top edge use the last cell
        low = np.minimum(low, geometry.dims[k] - 2).astype(np.intp)
        frac = idx - low
        lows.append(low)
        fracs.append(frac)
    return lows, fracs


def _iter_corners(ndim: int):
    for bits in range(1 << ndim):
        yield [(bits >> k) & 1 for k in range(ndim)]


def sample_values(values: np.ndarray, geometry: GridGeometry, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a ``dims``-shaped array at mm positions."""
    lows, fracs = _corner_index_weights(geometry, points)
    out = np.zeros(np.asarray(points).shape[:-1], dtype=float)
    for corner in _iter_corners(geometry.ndim):
        w = np.ones_like(out)
        idx = []
        for k, bit in enumerate(corner):
            w = w * (fracs[k] if bit else 1.0 - fracs[k])
            idx.append(lows[k] + bit)
        out += w * values[tuple(idx)]
    return out


def splat_values(
    point_values: np.ndarray, geometry: GridGeometry, points: np.ndarray
) -> np.ndarray:
    """Exact transpose of :func:`sample_values`: scatter point values onto the
    grid using the same corner weights (adjoint interpolation)."""
    lows, fracs = _corner_index_weights(geometry, points)
    out = np.zeros(geometry.dims, dtype=float)
    vals = np.asarray(point_values, dtype=float)
    for corner in _iter_corners(geometry.ndim):
        w = np.ones_like(vals)
        idx = []
        for k, bit in enumerate(corner):
            w = w * (fracs[k] if bit else 1.0 - fracs[k])
            idx.append((lows[k] + bit).ravel())
        flat = np.ravel_multi_index(tuple(idx), geometry.dims)
        out.ravel()[:] += np.bincount(
            flat, weights=(w * vals).ravel(), minlength=geometry.voxel_count
        )
    return out


def sample_scalar(g: ScalarGrid, points: np.ndarray) -> np.ndarray:
    """Sample a scalar grid at mm positions (any leading shape)."""
    return sample_values(g.values, g.geometry, points)


def sample_vector(g: VectorGrid, points: np.ndarray) -> np.ndarray:
    """Componentwise :func:`sample_scalar` of a vector grid."""
    pts = np.asarray(points, dtype=float)
    out = np.empty(pts.shape[:-1] + (g.geometry.ndim,), dtype=float)
    for c in range(g.geometry.ndim):
        out[..., c] = sample_values(g.values[..., c], g.geometry, pts)
    return out


# ---------------------------------------------------------------------------
# finite differences

def gradient_values(values: np.ndarray, spacing) -> list[np.ndarray]:
    """Central differences inside, one-sided at the boundary (np.gradient)."""
    if values.ndim == 1:
        return [np.gradient(values, spacing[0])]
    grads = np.gradient(values, *spacing)
    return list(grads) if isinstance(grads, (list, tuple)) else [grads]


def gradient(g: ScalarGrid) -> VectorGrid:
    grads = gradient_values(g.values, g.geometry.spacing)
    return VectorGrid(g.geometry, np.stack(grads, axis=-1))


def adjoint_gradient_axis(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Negative transpose of the 1-D gradient stencil along ``axis``.

    Agrees with the central difference at interior voxels; the boundary rows
    are the exact transpose of the one-sided rows used by
    :func:`gradient_values`. This is the stencil that makes discrete
    transport steps exactly adjoint to the divergence/advection steps.
    """
    v = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    n = v.shape[0]
    out = np.zeros_like(v)
    if n == 2:
        s = (v[0] + v[1]) / h
        out[0] = s
        out[1] = -s
        return np.moveaxis(out, 0, axis)
    # transpose of interior central-difference rows
    out[: n - 2] -= v[1 : n - 1] / (2.0 * h)
    out[2:] += v[1 : n - 1] / (2.0 * h)
    # transpose of one-sided boundary rows, then global negation
    out[0] -= v[0] / h
    out[1] += v[0] / h
    out[n - 2] -= v[n - 1] / h
    out[n - 1] += v[n - 1] / h
    return np.moveaxis(-out, 0, axis)


def adjoint_gradient(g: ScalarGrid) -> VectorGrid:
    comps = [
        adjoint_gradient_axis(g.values, g.geometry.spacing[k], k)
        for k in range(g.geometry.ndim)
    ]
    return VectorGrid(g.geometry, np.stack(comps, axis=-1))


def divergence_values(vec_values: np.ndarray, spacing) -> np.ndarray:
    out = np.zeros(vec_values.shape[:-1], dtype=float)
    for k in range(vec_values.shape[-1]):
        out += gradient_values(vec_values[..., k], spacing)[k]
    return out


def divergence_of_product(i: ScalarGrid, v: VectorGrid) -> ScalarGrid:
    """sum_k d(i*v_k)/dx_k with the package gradient stencil."""
    same_geometry(i, v, "divergence_of_product operands")
    prod = v.values * i.values[..., None]
    return ScalarGrid(i.geometry, divergence_values(prod, i.geometry.spacing))


def jacobian_matrix(displacement: VectorGrid) -> np.ndarray:
    """Finite-difference Jacobian of x -> x + u(x), shape ``dims + (d, d)``."""
    geo = displacement.geometry
    d = geo.ndim
    jac = np.zeros(geo.dims + (d, d), dtype=float)
    for r in range(d):
        grads = gradient_values(displacement.values[..., r], geo.spacing)
        for c in range(d):
            jac[..., r, c] = grads[c]
        jac[..., r, r] += 1.0
    return jac


def determinant_values(mats: np.ndarray) -> np.ndarray:
    d = mats.shape[-1]
    if d == 1:
        return mats[..., 0, 0].copy()
    if d == 2:
        return mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]
    a, b, c = mats[..., 0, 0], mats[..., 0, 1], mats[..., 0, 2]
    p, q, r = mats[..., 1, 0], mats[..., 1, 1], mats[..., 1, 2]
    x, y, z = mats[..., 2, 0], mats[..., 2, 1], mats[..., 2, 2]
    return a * (q * z - r * y) - b * (p * z - r * x) + c * (p * y - q * x)


def invert_matrices(mats: np.ndarray, min_det: float = 1e-8):
    """Closed-form (adjugate) inverse of stacked 1x1/2x2/3x3 matrices.

    Returns ``(inverses, dets)``; raises :class:`GridError` when any
    ``|det| < min_det``.
    """
    det = determinant_values(mats)
    bad = np.abs(det) < min_det
    if np.any(bad):
        loc = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), det.shape))
        raise GridError(f"singular Jacobian (|det| < {min_det}) at voxel {loc}")
    d = mats.shape[-1]
    inv = np.empty_like(mats)
    if d == 1:
        inv[..., 0, 0] = 1.0 / det
    elif d == 2:
        inv[..., 0, 0] = mats[..., 1, 1] / det
        inv[..., 0, 1] = -mats[..., 0, 1] / det
        inv[..., 1, 0] = -mats[..., 1, 0] / det
        inv[..., 1, 1] = mats[..., 0, 0] / det
    else:
        m = mats
        inv[..., 0, 0] = (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]) / det
        inv[..., 0, 1] = (m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]) / det
        inv[..., 0, 2] = (m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]) / det
        inv[..., 1, 0] = (m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]) / det
        inv[..., 1, 1] = (m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]) / det
        inv[..., 1, 2] = (m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]) / det
        inv[..., 2, 0] = (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]) / det
        inv[..., 2, 1] = (m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]) / det
        inv[..., 2, 2] = (m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]) / det
    return inv, det


def jacobian_determinant(displacement: VectorGrid) -> ScalarGrid:
    return ScalarGrid(
        displacement.geometry, determinant_values(jacobian_matrix(displacement))
    )


def count_nonpositive_jacobian(displacement: VectorGrid) -> int:
    """Diagnostic: number of voxels where det(D(x + u)) <= 0."""
    return int(np.sum(jacobian_determinant(displacement).values <= 0.0))


def compose(outer: VectorGrid, inner: VectorGrid) -> VectorGrid:
    """Displacement of outer-map(inner-map(x)): inner applied first."""
    same_geometry(outer, inner, "compose operands")
    pos = identity_positions(outer.geometry)
    mid = pos + inner.values
    return VectorGrid(outer.geometry, inner.values + sample_vector(outer, mid))


def map_points(displacement: VectorGrid, points: np.ndarray) -> np.ndarray:
    """Apply the map x -> x + u(x) to mm positions."""
    pts = np.asarray(points, dtype=float)
    return pts + sample_vector(displacement, pts)


# ---------------------------------------------------------------------------
# resampling

def downsample(g, factor: int):
    """Anti-aliased subsampling by an integer factor (sigma = 0.5*factor voxels).

    Works on both :class:`ScalarGrid` and :class:`VectorGrid`; spacing is
    multiplied by ``factor``, the origin is kept (node 0 is retained).
    """
    from . import kernel as _kernel  # local import to avoid a module cycle

    factor = int(factor)
    if factor < 1:
        raise GridError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return g
    geo = g.geometry
    new_dims = tuple(-(-n // factor) for n in geo.dims)  # ceil division
    if any(n < 2 for n in new_dims):
        raise GridError(f"downsampling {geo.dims} by {factor} leaves dims {new_dims}")
    new_geo = GridGeometry(
        new_dims, tuple(s * factor for s in geo.spacing), geo.origin
    )
    sigma_vox = 0.5 * factor
    if isinstance(g, ScalarGrid):
        sm = _kernel.smooth_array_voxels(g.values, sigma_vox)
        sub = sm[tuple(slice(None, None, factor) for _ in geo.dims)]
        return ScalarGrid(new_geo, sub)
    sm = np.stack(
        [
            _kernel.smooth_array_voxels(g.values[..., c], sigma_vox)
            for c in range(geo.ndim)
        ],
        axis=-1,
    )
    sub = sm[tuple(slice(None, None, factor) for _ in geo.dims) + (slice(None),)]
    return VectorGrid(new_geo, sub)


def upsample_field(v: VectorGrid, target: GridGeometry) -> VectorGrid:
    """Multilinear resampling of each component onto ``target``."""
    src = v.geometry
    if src.ndim != target.ndim:
        raise GridError("upsample_field: dimension mismatch")
    coarse = tuple(max(a, b) for a, b in zip(src.spacing, target.spacing))
    for k in range(src.ndim):
        if abs(src.origin[k] - target.origin[k]) > 0.5 * coarse[k]:
            raise GridError("upsample_field: origin mismatch beyond half a coarse voxel")
        if abs(src.extent[k] - target.extent[k]) > 0.5 * coarse[k]:
            raise GridError("upsample_field: extent mismatch beyond half a coarse voxel")
    if src == target:
        return VectorGrid(target, v.values.copy())
    pos = identity_positions(target)
    return VectorGrid(target, sample_vector(v, pos))


def downsample_geometry(geometry: GridGeometry, factor: int) -> GridGeometry:
    factor = int(factor)
    if factor == 1:
        return geometry
    new_dims = tuple(-(-n // factor) for n in geometry.dims)
    if any(n < 2 for n in new_dims):
        raise GridError(f"downsampling {geometry.dims} by {factor} leaves dims {new_dims}")
    return GridGeometry(
        new_dims, tuple(s * factor for s in geometry.spacing), geometry.origin
    )
