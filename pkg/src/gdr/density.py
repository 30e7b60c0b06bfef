"""Density/HU conversion, deformation actions and state/costate transport.

Two deformation actions are supported:

* density action  (mass preserving):   phi . I = |D phi^-1| * (I o phi^-1)
* intensity action (constant intensity): phi . I = I o phi^-1

and for each a matching state equation and its adjoint:

* density:   dI/dt = -div(I v)      adjoint: dlam/dt = -grad(lam) . v
* intensity: dI/dt = -grad(I) . v   adjoint: dlam/dt = -div(lam v)

The "FoT" transport realizes the same solutions through compositions with
the integrated maps instead of time stepping the PDEs; the "FoI" steps are
plain Euler updates whose spatial stencils are exact discrete transposes of
each other, which is what makes the assembled gradient match finite
differences of the discrete cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import (
    GridError,
    ScalarGrid,
    VectorGrid,
    adjoint_gradient_axis,
    compose,
    divergence_of_product,
    gradient_values,
    identity_positions,
    jacobian_determinant,
    sample_scalar,
    sample_values,
    same_geometry,
)
from .flow import FlowState

HU_AIR = -1000.0
HU_TISSUE = 55.0
HU_SCALE = HU_TISSUE - HU_AIR  # 1055
DENSITY_FLOOR = -0.05

# ``DensityImage`` is a ScalarGrid whose values are normalized tissue density
# (about 0 for air, 1 for soft tissue); the alias documents intent.
DensityImage = ScalarGrid


def hu_to_density(ct: ScalarGrid) -> DensityImage:
    """(CT + 1000) / 1055, with sanity bounds on the HU input."""
    bad = (ct.values < -1100.0) | (ct.values > 3000.0)
    if np.any(bad):
        loc = tuple(
            int(i) for i in np.unravel_index(int(np.argmax(bad)), ct.values.shape)
        )
        raise GridError(
            f"HU value {ct.values[loc]:.1f} at voxel {loc} outside [-1100, 3000]"
        )
    return ScalarGrid(ct.geometry, (ct.values - HU_AIR) / HU_SCALE)


def density_to_hu(img: DensityImage) -> ScalarGrid:
    return ScalarGrid(img.geometry, img.values * HU_SCALE + HU_AIR)


def validate_density(img: DensityImage, what: str = "density image") -> DensityImage:
    img.check_finite(what)
    if np.any(img.values < DENSITY_FLOOR):
        loc = tuple(int(i) for i in np.unravel_index(int(np.argmin(img.values)), img.values.shape))
        raise GridError(
            f"{what} has value {img.values[loc]:.4f} below the {DENSITY_FLOOR} floor at {loc}"
        )
    return img


def density_action(
    inverse_map: VectorGrid, jac_inv: ScalarGrid, img: DensityImage
) -> DensityImage:
    """Mass-preserving action: jac_inv(x) * I(x + psi(x))."""
    same_geometry(inverse_map, img, "density_action operands")
    pos = identity_positions(img.geometry)
    pulled = sample_values(img.values, img.geometry, pos + inverse_map.values)
    return ScalarGrid(img.geometry, jac_inv.values * pulled)


def intensity_action(inverse_map: VectorGrid, img: ScalarGrid) -> ScalarGrid:
    """Constant-intensity action: plain warp I(x + psi(x))."""
    same_geometry(inverse_map, img, "intensity_action operands")
    pos = identity_positions(img.geometry)
    return ScalarGrid(
        img.geometry, sample_values(img.values, img.geometry, pos + inverse_map.values)
    )


def total_mass(img: ScalarGrid) -> float:
    return float(np.sum(img.values)) * img.geometry.voxel_volume


# ---------------------------------------------------------------------------
# state transport

def state_flow_fot(template: DensityImage, flow: FlowState) -> list[DensityImage]:
    """Deformed-template images at every computational time point."""
    return [
        density_action(psi, ji, template)
        for psi, ji in zip(flow.maps_inv, flow.jac_inv)
    ]


def intensity_state_flow_fot(template: ScalarGrid, flow: FlowState) -> list[ScalarGrid]:
    return [intensity_action(psi, template) for psi in flow.maps_inv]


def state_step_foi(img: DensityImage, vel: VectorGrid, dt: float) -> DensityImage:
    """One Euler step of the conservation-form state equation."""
    return ScalarGrid(
        img.geometry, img.values - dt * divergence_of_product(img, vel).values
    )


def intensity_state_step_foi(img: ScalarGrid, vel: VectorGrid, dt: float) -> ScalarGrid:
    """One Euler step of the advection state equation."""
    grads = gradient_values(img.values, img.geometry.spacing)
    adv = sum(vel.values[..., k] * grads[k] for k in range(img.geometry.ndim))
    return ScalarGrid(img.geometry, img.values - dt * adv)


# ---------------------------------------------------------------------------
# costate boundary terms

def costate_terminal(
    i_end: DensityImage, obs: DensityImage, mask: ScalarGrid, gamma: float
) -> ScalarGrid:
    """(2 / gamma^2) * (I_end - obs) * mask."""
    if gamma <= 0:
        raise GridError(f"gamma must be > 0, got {gamma}")
    same_geometry(i_end, obs, "costate_terminal operands")
    return ScalarGrid(
        i_end.geometry, (2.0 / gamma**2) * (i_end.values - obs.values) * mask.values
    )


def costate_jump(
    lam_after: ScalarGrid,
    i_at_obs: DensityImage,
    obs: DensityImage,
    mask: ScalarGrid,
    gamma: float,
) -> ScalarGrid:
    """lam(t^-) = lam(t^+) + masked residual term."""
    jump = costate_terminal(i_at_obs, obs, mask, gamma)
    return ScalarGrid(lam_after.geometry, lam_after.values + jump.values)


# ---------------------------------------------------------------------------
# costate transport

@dataclass
class CostateTrajectory:
    """Adjoint field at every computational time point.

    ``values[j]`` holds the time-t_j costate including any jump applied at
    that index (the value that transports further backward); ``jumps`` keeps
    the raw jump terms per observation index.  A jump recorded at index 0 is
    kept for completeness but is never consumed by the gradient.
    """

    values: list[ScalarGrid]
    jumps: dict[int, ScalarGrid] = field(default_factory=dict)


def _transport_composition(
    lam: ScalarGrid, flow: FlowState, obs_index: int, j: int
) -> ScalarGrid:
    """lam o (phi_{t_i} o phi_j^{-1}) -- value constant along trajectories."""
    if j == obs_index:
        return ScalarGrid(lam.geometry, lam.values.copy())
    chain = compose(flow.maps_fwd[obs_index], flow.maps_inv[j])
    pos = identity_positions(lam.geometry)
    return ScalarGrid(
        lam.geometry, sample_values(lam.values, lam.geometry, pos + chain.values)
    )


def _transport_conservative(
    lam: ScalarGrid, flow: FlowState, obs_index: int, j: int
) -> ScalarGrid:
    """|D chain| * (lam o chain): mass-preserving backward transport."""
    if j == obs_index:
        return ScalarGrid(lam.geometry, lam.values.copy())
    chain = compose(flow.maps_fwd[obs_index], flow.maps_inv[j])
    det = jacobian_determinant(chain)
    pos = identity_positions(lam.geometry)
    pulled = sample_values(lam.values, lam.geometry, pos + chain.values)
    return ScalarGrid(lam.geometry, det.values * pulled)


def _costate_flow(jumps: list[ScalarGrid], flow: FlowState, transport) -> CostateTrajectory:
    tg = flow.time_grid
    obs_idx = tg.obs_indices
    if len(jumps) != len(obs_idx):
        raise GridError(f"expected {len(obs_idx)} jump terms, got {len(jumps)}")
    geo = flow.geometry
    values: list[ScalarGrid | None] = [None] * tg.n_points
    recorded: dict[int, ScalarGrid] = {obs_idx[i]: jumps[i] for i in range(len(jumps))}

    lam_minus = jumps[-1]  # terminal condition at t = 1
    values[obs_idx[-1]] = lam_minus
    for i in range(len(obs_idx) - 1, 0, -1):
        top = obs_idx[i]
        bottom = obs_idx[i - 1]
        for j in range(top - 1, bottom - 1, -1):
            values[j] = transport(lam_minus, flow, top, j)
        if i - 1 > 0:
            values[bottom] = ScalarGrid(
                geo, values[bottom].values + jumps[i - 1].values
            )
            lam_minus = values[bottom]
        # at index 0 the jump is recorded but not folded in: it cannot
        # influence the velocity gradient and the template update is closed form
    return CostateTrajectory([v for v in values], recorded)


def costate_flow_fot(jumps: list[ScalarGrid], flow: FlowState) -> CostateTrajectory:
    """Composition transport of the density-action adjoint (piecewise constant
    along flow trajectories, jumps folded in at interior observations)."""
    return _costate_flow(jumps, flow, _transport_composition)


def intensity_costate_flow_fot(jumps: list[ScalarGrid], flow: FlowState) -> CostateTrajectory:
    """Conservative transport of the intensity-action adjoint."""
    return _costate_flow(jumps, flow, _transport_conservative)


def costate_step_foi(lam: ScalarGrid, vel: VectorGrid, dt: float) -> ScalarGrid:
    """One backward Euler step of dlam/dt = -grad(lam) . v.

    Uses the transpose gradient stencil so the step is the exact adjoint of
    :func:`state_step_foi`.
    """
    geo = lam.geometry
    adv = np.zeros_like(lam.values)
    for k in range(geo.ndim):
        adv += vel.values[..., k] * adjoint_gradient_axis(lam.values, geo.spacing[k], k)
    return ScalarGrid(geo, lam.values + dt * adv)


def intensity_costate_step_foi(lam: ScalarGrid, vel: VectorGrid, dt: float) -> ScalarGrid:
    """One backward Euler step of dlam/dt = -div(lam v), the exact adjoint of
    :func:`intensity_state_step_foi`."""
    geo = lam.geometry
    div = np.zeros_like(lam.values)
    for k in range(geo.ndim):
        div += adjoint_gradient_axis(vel.values[..., k] * lam.values, geo.spacing[k], k)
    return ScalarGrid(geo, lam.values + dt * div)
