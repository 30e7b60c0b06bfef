"""Evaluation metrics: Jacobian error, sharpness (MLV), landmark error, SSD."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .grid import GridError, LandmarkSet, ScalarGrid, same_geometry


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    region: str  # whole | lung | artifact
    units: str

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise GridError(f"metric {self.name} is not finite")


def _region_values(values: np.ndarray, region: ScalarGrid | None) -> np.ndarray:
    if region is None:
        return values.ravel()
    sel = region.values > 0.5
    if not np.any(sel):
        raise GridError("metric region is empty")
    return values[sel]


def jacobian_error(
    estimated: ScalarGrid, truth: ScalarGrid, region: ScalarGrid | None = None
) -> float:
    """Mean absolute difference over the region voxels."""
    same_geometry(estimated, truth, "jacobian_error operands")
    return float(np.mean(_region_values(np.abs(estimated.values - truth.values), region)))


def mlv(img: ScalarGrid) -> ScalarGrid:
    """Maximum local variation: per voxel, max |center - neighbor| over the
    full 8/26-neighborhood; boundary voxels use the neighbors they have."""
    vals = img.values
    d = vals.ndim
    out = np.zeros_like(vals)
    for offset in product((-1, 0, 1), repeat=d):
        if all(o == 0 for o in offset):
            continue
        src = tuple(
            slice(max(o, 0), vals.shape[k] + min(o, 0)) for k, o in enumerate(offset)
        )
        dst = tuple(
            slice(max(-o, 0), vals.shape[k] + min(-o, 0)) for k, o in enumerate(offset)
        )
        diff = np.abs(vals[dst] - vals[src])
        np.maximum(out[dst], diff, out=out[dst])
    return ScalarGrid(img.geometry, out)


def mean_mlv(img: ScalarGrid, region: ScalarGrid | None = None) -> float:
    return float(np.mean(_region_values(mlv(img).values, region)))


def mean_landmark_error(a: LandmarkSet, b: LandmarkSet) -> float:
    """Mean Euclidean distance between corresponding points (mm)."""
    if not (a.paired and b.paired):
        raise GridError("landmark sets must be paired")
    if len(a) != len(b):
        raise GridError("paired landmark sets must have equal cardinality")
    return float(np.mean(np.linalg.norm(a.points - b.points, axis=1)))


def masked_ssd(a: ScalarGrid, b: ScalarGrid, mask: ScalarGrid | None = None) -> float:
    """Sum of masked squared differences times voxel volume (one data-term
    summand without the 1/gamma^2 factor)."""
    same_geometry(a, b, "masked_ssd operands")
    resid2 = (a.values - b.values) ** 2
    if mask is not None:
        resid2 = resid2 * mask.values
    return float(np.sum(resid2)) * a.geometry.voxel_volume
