"""Time discretization and Euler integration of the deformation flows.

The forward maps solve d(phi_t)/dt = v_t(phi_t) with phi_0 = Id.  The
inverse maps are integrated with the robust first-order scheme that only
needs first derivatives of the velocity fields:

    psi[j+1] = psi[j] - dt * (Dphi[j] o psi[j])^{-1} v[j]

and the inverse-map Jacobian determinants are taken as the reciprocal of the
forward determinant sampled through the inverse map rather than by
differentiating psi directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import (
    GridError,
    GridGeometry,
    ScalarGrid,
    VectorGrid,
    compose,
    identity_positions,
    invert_matrices,
    jacobian_determinant,
    jacobian_matrix,
    sample_values,
    sample_vector,
)
from .kernel import MomentumField


class FlowError(RuntimeError):
    """Integration failure (singular or folded transformation)."""


@dataclass(frozen=True)
class TimeGrid:
    """Computational time points: k Euler steps per observation interval.

    N observations at strictly increasing times (t_0 = 0, t_{N-1} = 1) give
    P = k*(N-1) + 1 points; every observation time is a grid point.
    """

    obs_times: tuple[float, ...]
    steps_per_interval: int

    def __post_init__(self):
        times = tuple(float(t) for t in self.obs_times)
        object.__setattr__(self, "obs_times", times)
        if len(times) < 2:
            raise GridError("need at least two observation times")
        if abs(times[0]) > 1e-12 or abs(times[-1] - 1.0) > 1e-12:
            raise GridError("observation times must start at 0 and end at 1")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise GridError("observation times must be strictly increasing")
        if self.steps_per_interval < 1:
            raise GridError("steps_per_interval must be >= 1")

    @property
    def n_obs(self) -> int:
        return len(self.obs_times)

    @property
    def n_points(self) -> int:
        return self.steps_per_interval * (self.n_obs - 1) + 1

    @property
    def times(self) -> np.ndarray:
        k = self.steps_per_interval
        pts = []
        for a, b in zip(self.obs_times, self.obs_times[1:]):
            pts.extend(a + (b - a) * j / k for j in range(k))
        pts.append(self.obs_times[-1])
        return np.asarray(pts)

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def obs_indices(self) -> tuple[int, ...]:
        k = self.steps_per_interval
        return tuple(i * k for i in range(self.n_obs))

    @property
    def step_weights(self) -> np.ndarray:
        """Left-rule quadrature weight per time point (last point zero)."""
        return np.concatenate([self.dts, [0.0]])


def integrate_forward(velocities: list[VectorGrid], tg: TimeGrid) -> list[VectorGrid]:
    """Euler flow of the forward maps, returned as P displacement fields."""
    if len(velocities) != tg.n_points:
        raise GridError(
            f"expected {tg.n_points} velocity fields, got {len(velocities)}"
        )
    geo = velocities[0].geometry
    pos = identity_positions(geo)
    dts = tg.dts
    maps = [VectorGrid.zeros(geo)]
    u = maps[0].values
    for j in range(tg.n_points - 1):
        u = u + dts[j] * sample_vector(velocities[j], pos + u)
        maps.append(VectorGrid(geo, u))
    return maps


def integrate_inverse(
    velocities: list[VectorGrid], forward_maps: list[VectorGrid], tg: TimeGrid,
    min_det: float = 1e-8,
) -> list[VectorGrid]:
    """Euler flow of the inverse maps using sampled forward-map Jacobians."""
    geo = velocities[0].geometry
    pos = identity_positions(geo)
    dts = tg.dts
    maps = [VectorGrid.zeros(geo)]
    s = maps[0].values
    for j in range(tg.n_points - 1):
        jac = jacobian_matrix(forward_maps[j])
        psi_pos = pos + s
        sampled = np.empty_like(jac)
        for r in range(geo.ndim):
            for c in range(geo.ndim):
                sampled[..., r, c] = sample_values(jac[..., r, c], geo, psi_pos)
        try:
            inv, _ = invert_matrices(sampled, min_det=min_det)
        except GridError as exc:
            raise FlowError(f"inverse flow failed at time index {j}: {exc}") from exc
        step = np.einsum("...rc,...c->...r", inv, velocities[j].values)
        s = s - dts[j] * step
        maps.append(VectorGrid(geo, s))
    return maps


def forward_jacobians(forward_maps: list[VectorGrid]) -> list[ScalarGrid]:
    return [jacobian_determinant(u) for u in forward_maps]


def jacobian_det_inverse(
    forward_maps: list[VectorGrid],
    inverse_maps: list[VectorGrid],
    forward_dets: list[ScalarGrid] | None = None,
) -> list[ScalarGrid]:
    """|D(phi^-1)| = 1 / (|D phi| o phi^-1), per time point."""
    geo = forward_maps[0].geometry
    pos = identity_positions(geo)
    if forward_dets is None:
        forward_dets = forward_jacobians(forward_maps)
    out = []
    for j, (det, psi) in enumerate(zip(forward_dets, inverse_maps)):
        if np.any(det.values <= 0.0):
            loc = tuple(int(i) for i in np.unravel_index(int(np.argmin(det.values)), det.values.shape))
            raise FlowError(
                f"non-positive forward Jacobian at time index {j}, voxel {loc} "
                f"(min {det.values.min():.3e})"
            )
        pulled = sample_values(det.values, geo, pos + psi.values)
        out.append(ScalarGrid(geo, 1.0 / pulled))
    return out


def inverse_consistency_voxels(
    forward_maps: list[VectorGrid], inverse_maps: list[VectorGrid]
) -> float:
    """max_j max_x |(phi_j o psi_j)(x) - x| in voxel units."""
    geo = forward_maps[0].geometry
    h = np.asarray(geo.spacing)
    worst = 0.0
    for phi, psi in zip(forward_maps, inverse_maps):
        resid = compose(phi, psi).values / h
        worst = max(worst, float(np.max(np.abs(resid))))
    return worst


@dataclass
class FlowState:
    """All per-time-point flow quantities for one velocity iterate."""

    time_grid: TimeGrid
    velocities: list[VectorGrid]
    momenta: MomentumField | None
    maps_fwd: list[VectorGrid]
    maps_inv: list[VectorGrid]
    jac_fwd: list[ScalarGrid]
    jac_inv: list[ScalarGrid]
    diagnostics: dict = field(default_factory=dict)

    @property
    def geometry(self) -> GridGeometry:
        return self.velocities[0].geometry

    @classmethod
    def from_velocities(
        cls,
        velocities: list[VectorGrid],
        tg: TimeGrid,
        momenta: MomentumField | None = None,
        check_consistency: bool = False,
    ) -> "FlowState":
        fwd = integrate_forward(velocities, tg)
        inv = integrate_inverse(velocities, fwd, tg)
        dets = forward_jacobians(fwd)
        jinv = jacobian_det_inverse(fwd, inv, dets)
        diag = {
            "min_jac_fwd": float(min(d.values.min() for d in dets)),
            "nonpositive_jac_voxels": int(sum(np.sum(d.values <= 0) for d in dets)),
        }
        if check_consistency:
            diag["inverse_consistency_voxels"] = inverse_consistency_voxels(fwd, inv)
        return cls(tg, velocities, momenta, fwd, inv, dets, jinv, diag)
