"""Synthetic lung-like time series with ground truth, artifacts and dropout.

The phantom is a procedurally generated 2D/3D "lung": an ellipsoidal
low-density region inside a soft-tissue body, with optional vessel-like
bright curves and fine texture, sitting above a bright diaphragm interface.
A seeded diaphragm-like deformation generates the breathing phases; phase
intensities follow the volume-scaling rule

    HU(t) = |D phi_t| * (HU_base + 1000) - 1000,   phi_t = Id + t * u

so the integrated tissue density is identical across phases.  The last grid
axis plays the superior-inferior role: artifact slabs and dropout slabs are
stacks of constant-index slices along that axis, spanning the full extent of
the other axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .density import hu_to_density
from .grid import (
    GridError,
    GridGeometry,
    LandmarkSet,
    ScalarGrid,
    VectorGrid,
    identity_positions,
    jacobian_determinant,
    sample_values,
    sample_vector,
)
from .kernel import smooth_array_voxels
from .regression import TimeSeries

HU_BODY = 40.0
HU_LUNG = -850.0
HU_VESSEL = -150.0
HU_AIR = -1000.0
MIN_TRUE_DET = 0.1


@dataclass
class GroundTruth:
    """Everything needed to score a regression of a synthesized series."""

    base_hu: ScalarGrid
    displacement: VectorGrid  # full-amplitude field u (phase -> base coords)
    factors: tuple[float, ...]  # per-phase scale, strictly increasing in [0, 1]
    true_maps: list[VectorGrid]  # Id + factor * u as displacements
    true_jacobians: list[ScalarGrid]  # det D(Id + factor * u)
    lung_mask: ScalarGrid  # conservative lung-core region for metrics
    landmarks_moving: LandmarkSet | None = None  # in final-phase coordinates
    landmarks_reference: LandmarkSet | None = None  # matching base positions
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, ...] = (64, 64)
    spacing: tuple[float, ...] = (1.0, 1.0)
    amplitude_mm: float = 6.0
    n_phases: int = 6
    seed: int = 0
    texture: str = "vessels"  # none | vessels | fine
    n_landmarks: int = 20

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.dims, self.spacing, tuple(0.0 for _ in self.dims))


def _smoothstep(x: np.ndarray, width: float) -> np.ndarray:
    """0 -> 1 transition of the given width around x = 0."""
    t = np.clip(x / max(width, 1e-9) + 0.5, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _ellipse(pos: np.ndarray, center, radii, edge_mm: float) -> np.ndarray:
    q = sum(
        ((pos[..., k] - center[k]) / radii[k]) ** 2 for k in range(pos.shape[-1])
    )
    # signed distance proxy scaled to mm near the boundary
    r = np.sqrt(np.maximum(q, 1e-12))
    dist = (1.0 - r) * min(radii)
    return _smoothstep(dist, edge_mm)


def _phantom_layout(geometry: GridGeometry):
    ext = geometry.extent
    d = geometry.ndim
    center = [0.5 * e for e in ext]
    body_c = list(center)
    body_r = [0.42 * e for e in ext]
    lung_c = list(center)
    lung_c[-1] = 0.42 * ext[-1]
    lung_r = [0.30 * e for e in ext]
    lung_r[-1] = 0.26 * ext[-1]
    return body_c, body_r, lung_c, lung_r


def base_image(geometry: GridGeometry, seed: int = 0, texture: str = "vessels") -> ScalarGrid:
    """Procedural lung-like HU image; deterministic given the seed."""
    if texture not in ("none", "vessels", "fine"):
        raise GridError(f"unknown phantom texture {texture!r}")
    rng = np.random.default_rng(seed)
    pos = identity_positions(geometry)
    d = geometry.ndim
    body_c, body_r, lung_c, lung_r = _phantom_layout(geometry)
    # small seeded jitter so different seeds give different anatomy
    jit = rng.uniform(-0.02, 0.02, size=d) * np.asarray(geometry.extent)
    lung_c = [c + j for c, j in zip(lung_c, jit)]

    body = _ellipse(pos, body_c, body_r, edge_mm=2.0)
    lung = _ellipse(pos, lung_c, lung_r, edge_mm=1.5)
    hu = HU_AIR + (HU_BODY - HU_AIR) * body
    hu = hu + (HU_LUNG - HU_BODY) * lung * body

    if texture == "vessels":
        vessel = np.zeros(geometry.dims)
        hilum = np.asarray(lung_c)
        n_curves = 4 if d == 2 else 6
        for _ in range(n_curves):
            ang = rng.uniform(0, 2 * np.pi)
            if d == 2:
                direction = np.array([np.cos(ang), np.sin(ang)])
            else:
                ang2 = rng.uniform(0, np.pi)
                direction = np.array(
                    [np.cos(ang) * np.sin(ang2), np.sin(ang) * np.sin(ang2), np.cos(ang2)]
                )
            curve_len = 0.8 * min(lung_r)
            bend = rng.uniform(-1.5, 1.5, size=d) / max(curve_len, 1.0)
            p = hilum.copy()
            v = direction.copy()
            width = rng.uniform(1.0, 1.8)
            for _ in range(int(curve_len)):
                p = p + v
                v = v + bend
                v = v / np.linalg.norm(v)
                d2 = sum((pos[..., k] - p[k]) ** 2 for k in range(d))
                vessel = np.maximum(vessel, np.exp(-d2 / (2.0 * width**2)))
        hu = hu + (HU_VESSEL - hu) * vessel * lung
    elif texture == "fine":
        noise = smooth_array_voxels(rng.standard_normal(geometry.dims), 1.0)
        noise = noise / max(np.max(np.abs(noise)), 1e-12)
        hu = hu + 220.0 * noise * lung
    if texture == "none":
        hu = smooth_array_voxels(hu, 2.0)
    # texture must not undershoot physical air: keep densities positive under
    # the volume-scaling synthesis rule
    return ScalarGrid(geometry, np.maximum(hu, -995.0))


def lung_core_mask(geometry: GridGeometry, margin_mm: float = 6.0) -> ScalarGrid:
    """Binary lung region eroded by ``margin_mm`` (valid in all phases)."""
    pos = identity_positions(geometry)
    _, _, lung_c, lung_r = _phantom_layout(geometry)
    radii = [max(r - margin_mm, 1.0) for r in lung_r]
    q = sum(((pos[..., k] - lung_c[k]) / radii[k]) ** 2 for k in range(geometry.ndim))
    return ScalarGrid(geometry, (q <= 1.0).astype(float))


def make_analytic_deformation(
    geometry: GridGeometry, amplitude_mm: float, seed: int = 0
) -> VectorGrid:
    """Diaphragm-like smooth displacement, zero at the domain boundary.

    The map Id + u must be diffeomorphic: generation fails if the analytic
    field reaches det(D(Id + u)) <= 0.1 anywhere.
    """
    rng = np.random.default_rng(seed)
    pos = identity_positions(geometry)
    d = geometry.ndim
    ext = geometry.extent
    _, _, lung_c, lung_r = _phantom_layout(geometry)
    center = list(lung_c)
    center[-1] = lung_c[-1] + lung_r[-1]  # diaphragm interface
    jitter = rng.uniform(-0.04, 0.04, size=d) * np.asarray(ext)
    center = [c + j for c, j in zip(center, jitter)]
    width = (0.16 + rng.uniform(-0.02, 0.02)) * min(ext)

    r2 = sum((pos[..., k] - center[k]) ** 2 for k in range(d))
    bump = np.exp(-r2 / (2.0 * width**2))
    taper = np.ones(geometry.dims)
    for k in range(d):
        lo = geometry.origin[k]
        hi = lo + (geometry.dims[k] - 1) * geometry.spacing[k]
        edge = np.minimum(pos[..., k] - lo, hi - pos[..., k])
        taper = taper * _smoothstep(edge - 4.0, 8.0)
    u = np.zeros(geometry.dims + (d,))
    u[..., -1] = amplitude_mm * bump * taper
    # mild lateral component so the field is not axis-separable
    u[..., 0] += 0.25 * amplitude_mm * bump * taper * (pos[..., 0] - center[0]) / (
        2.0 * width
    )
    field_out = VectorGrid(geometry, u)
    if amplitude_mm != 0.0:
        min_det = float(jacobian_determinant(field_out).values.min())
        if min_det <= MIN_TRUE_DET:
            raise GridError(
                f"analytic deformation too strong: min det {min_det:.3f} <= {MIN_TRUE_DET}"
            )
    return field_out


def synthesize_timeseries(
    base_hu: ScalarGrid,
    displacement: VectorGrid,
    factors,
    n_landmarks: int = 0,
    seed: int = 0,
) -> tuple[TimeSeries, GroundTruth]:
    """Warp + volume-scale the base image into a mass-consistent series.

    ``factors`` are the per-phase scales of the displacement and double as
    the observation times (first must be 0, last 1).
    """
    factors = tuple(float(f) for f in factors)
    if any(b <= a for a, b in zip(factors, factors[1:])):
        raise GridError("factors must be strictly increasing")
    geo = base_hu.geometry
    pos = identity_positions(geo)
    images, maps, jacs = [], [], []
    for f in factors:
        disp = VectorGrid(geo, f * displacement.values)
        det = jacobian_determinant(disp)
        if float(det.values.min()) <= 0.0:
            raise GridError(f"phase factor {f} yields a non-diffeomorphic map")
        warped = sample_values(base_hu.values, geo, pos + disp.values)
        hu = det.values * (warped - HU_AIR) + HU_AIR
        images.append(hu_to_density(ScalarGrid(geo, hu)))
        maps.append(disp)
        jacs.append(det)
    ones = ScalarGrid.full(geo, 1.0)
    ts = TimeSeries(images, [ones] * len(factors), factors)

    lm_moving = lm_ref = None
    if n_landmarks > 0:
        rng = np.random.default_rng(seed + 7919)
        _, _, lung_c, lung_r = _phantom_layout(geo)
        pts = []
        while len(pts) < n_landmarks:
            cand = np.array(
                [rng.uniform(c - 0.8 * r, c + 0.8 * r) for c, r in zip(lung_c, lung_r)]
            )
            q = sum(((cand[k] - lung_c[k]) / (0.85 * lung_r[k])) ** 2 for k in range(geo.ndim))
            if q <= 1.0:
                pts.append(cand)
        moving = np.asarray(pts)
        reference = moving + sample_vector(displacement, moving)
        lm_moving = LandmarkSet(moving, paired=True)
        lm_ref = LandmarkSet(reference, paired=True)

    truth = GroundTruth(
        base_hu=base_hu,
        displacement=displacement,
        factors=factors,
        true_maps=maps,
        true_jacobians=jacs,
        lung_mask=lung_core_mask(geo),
        landmarks_moving=lm_moving,
        landmarks_reference=lm_ref,
        meta={"seed": seed},
    )
    return ts, truth


def make_phantom(spec: PhantomSpec) -> tuple[TimeSeries, GroundTruth]:
    """Base image + deformation + series in one call."""
    geo = spec.geometry
    base = base_image(geo, seed=spec.seed, texture=spec.texture)
    u = make_analytic_deformation(geo, spec.amplitude_mm, seed=spec.seed)
    if spec.n_phases < 2:
        raise GridError("need at least two phases")
    factors = tuple(np.linspace(0.0, 1.0, spec.n_phases))
    return synthesize_timeseries(
        base, u, factors, n_landmarks=spec.n_landmarks, seed=spec.seed
    )


# ---------------------------------------------------------------------------
# artifacts

def _si_axis(geometry: GridGeometry) -> int:
    return geometry.ndim - 1


def _diaphragm_slice(img: ScalarGrid) -> int:
    """Index (along the SI axis) of the strongest mean intensity edge in the
    lower half of the image: the diaphragm interface."""
    axis = _si_axis(img.geometry)
    grad = np.abs(np.diff(img.values, axis=axis))
    other = tuple(k for k in range(img.values.ndim) if k != axis)
    profile = grad.mean(axis=other)
    half = len(profile) // 2
    return half + int(np.argmax(profile[half:]))


def inject_duplication(
    ts: TimeSeries, phase_index: int, thickness_mm: float,
    interpolation_smear_mm: float = 2.0,
) -> tuple[TimeSeries, ScalarGrid]:
    """Duplicate the slab just above the diaphragm into the slab below it.

    Emulates the stack-boundary mechanism: the diaphragm edge appears twice
    in the injected phase.  Real scanners reconstruct the discontinuous
    boundary data by interpolation, so the duplicated content is additionally
    smeared along the SI axis by ``interpolation_smear_mm`` (confined to the
    slab).  Returns the modified series and the exact artifact mask (0 inside
    the replaced slab).
    """
    if not 0 <= phase_index < ts.n_obs:
        raise GridError(f"phase index {phase_index} out of range")
    geo = ts.geometry
    axis = _si_axis(geo)
    ones = np.ones(geo.dims)
    if thickness_mm <= 0:
        return ts, ScalarGrid(geo, ones)
    t_vox = max(1, int(round(thickness_mm / geo.spacing[axis])))
    if t_vox >= geo.dims[axis] // 2:
        raise GridError("duplication slab thicker than half the SI extent")
    # the slab of lung just above the diaphragm interface is imaged twice:
    # its content replaces the slab straddling the interface below it
    edge = _diaphragm_slice(ts.images[phase_index])
    start = min(max(edge - t_vox, 2 * t_vox), geo.dims[axis] - t_vox)
    dst = [slice(None)] * geo.ndim
    src = [slice(None)] * geo.ndim
    dst[axis] = slice(start, start + t_vox)
    src[axis] = slice(start - t_vox, start)

    values = ts.images[phase_index].values.copy()
    block = values[tuple(src)].copy()
    smear_vox = interpolation_smear_mm / geo.spacing[axis]
    if smear_vox > 0:
        sigmas = [0.0] * geo.ndim
        sigmas[axis] = smear_vox
        block = smooth_array_voxels(block, sigmas)
    values[tuple(dst)] = block
    mask = ones.copy()
    mask[tuple(dst)] = 0.0
    images = list(ts.images)
    images[phase_index] = ScalarGrid(geo, values)
    new_ts = TimeSeries(images, list(ts.masks), ts.times)
    return new_ts, ScalarGrid(geo, mask)


def make_dropout_masks(
    ts: TimeSeries, fraction: float, slab_mm: float = 12.0, seed: int = 0
) -> list[ScalarGrid]:
    """Random non-overlapping SI slabs per phase until ``fraction`` of all
    voxels is masked out (within half a slab's share).  Masks are 0 inside
    the dropped slabs."""
    if not 0.0 <= fraction <= 0.5:
        raise GridError(f"dropout fraction must be in [0, 0.5], got {fraction}")
    geo = ts.geometry
    axis = _si_axis(geo)
    masks = [np.ones(geo.dims) for _ in range(ts.n_obs)]
    if fraction == 0.0:
        return [ScalarGrid(geo, m) for m in masks]
    t_vox = max(1, int(round(slab_mm / geo.spacing[axis])))
    n_si = geo.dims[axis]
    share = t_vox / (n_si * ts.n_obs)  # fraction added by one slab
    if t_vox > n_si:
        raise GridError("dropout slab thicker than the SI extent")
    rng = np.random.default_rng(seed)
    occupied: list[list[tuple[int, int]]] = [[] for _ in range(ts.n_obs)]
    achieved = 0.0
    attempts = 0
    while achieved + 0.5 * share <= fraction:
        attempts += 1
        if attempts > 10000:
            raise GridError(
                f"cannot reach dropout fraction {fraction} with {slab_mm} mm slabs"
            )
        phase = int(rng.integers(ts.n_obs))
        start = int(rng.integers(0, n_si - t_vox + 1))
        if any(start < e and s < start + t_vox for s, e in occupied[phase]):
            continue
        occupied[phase].append((start, start + t_vox))
        sl = [slice(None)] * geo.ndim
        sl[axis] = slice(start, start + t_vox)
        masks[phase][tuple(sl)] = 0.0
        achieved += share
    return [ScalarGrid(geo, m) for m in masks]


def apply_dropout(
    ts: TimeSeries, masks: list[ScalarGrid], fill: str = "interpolate"
) -> TimeSeries:
    """Corrupt the dropped slabs and attach the masks to the series.

    ``fill="interpolate"`` (default) replaces each dropped slab with a linear
    SI interpolation between its bounding surviving slices -- what a scanner
    reconstruction does with missing data.  ``fill="blank"`` zeroes the slabs
    instead.  Voxels outside the mask-zero regions are never touched.
    """
    if len(masks) != ts.n_obs:
        raise GridError("one dropout mask per phase required")
    if fill not in ("interpolate", "blank"):
        raise GridError(f"unknown dropout fill {fill!r}")
    geo = ts.geometry
    axis = _si_axis(geo)
    n_si = geo.dims[axis]
    images = []
    for img, m in zip(ts.images, masks):
        vals = np.moveaxis(img.values.copy(), axis, -1)
        keep = np.moveaxis(m.values, axis, -1)[(0,) * (geo.ndim - 1)] > 0.0
        j = 0
        while j < n_si:
            if keep[j]:
                j += 1
                continue
            a = j
            while j < n_si and not keep[j]:
                j += 1
            b = j  # dropped run is [a, b)
            if fill == "blank":
                vals[..., a:b] = 0.0
                continue
            lo = vals[..., a - 1] if a > 0 else None
            hi = vals[..., b] if b < n_si else None
            if lo is None and hi is None:
                vals[..., a:b] = 0.0
                continue
            if lo is None:
                lo = hi
            if hi is None:
                hi = lo
            for offset in range(b - a):
                t = (offset + 1) / (b - a + 1)
                vals[..., a + offset] = (1.0 - t) * lo + t * hi
        images.append(ScalarGrid(img.geometry, np.moveaxis(vals, -1, axis)))
    return TimeSeries(images, list(masks), ts.times)


def dilate_mask(mask: ScalarGrid, width_mm: float) -> ScalarGrid:
    """Grow the zero (artifact) region along the SI axis by ``width_mm`` on
    each side."""
    from scipy.ndimage import binary_dilation

    geo = mask.geometry
    axis = _si_axis(geo)
    w_vox = int(round(width_mm / geo.spacing[axis]))
    if w_vox <= 0:
        return ScalarGrid(geo, (mask.values > 0.0).astype(float))
    shape = [1] * geo.ndim
    shape[axis] = 2 * w_vox + 1
    structure = np.ones(shape, dtype=bool)
    zero = binary_dilation(mask.values <= 0.0, structure=structure)
    return ScalarGrid(geo, (~zero).astype(float))


def propagate_landmarks(lm: LandmarkSet, displacement: VectorGrid) -> LandmarkSet:
    """Map each point through x -> x + u(x)."""
    moved = lm.points + sample_vector(displacement, lm.points)
    return LandmarkSet(moved, paired=lm.paired)
