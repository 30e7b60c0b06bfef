"""Regression objective, adjoint gradient, template updates and drivers.

Two modes share one engine:

* ``gdr``: mass-preserving (density) action, binary/soft artifact masks in
  the data term, masked density-weighted template update.
* ``gir``: constant-intensity baseline -- plain warps, no masks, determinant
  weighted template update.

Two drivers share the same outer loop:

* ``fot``: states and costates realized by composition with the integrated
  maps (robust to image texture).
* ``foi``: states and costates realized by Euler stepping of the transport
  PDEs. The spatial stencils of the forward and adjoint steps are exact
  transposes, so for this driver the assembled gradient matches central
  finite differences of the discrete cost to roundoff.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import density as dens
from .density import CostateTrajectory, DensityImage
from .flow import FlowError, FlowState, TimeGrid
from .grid import (
    GridError,
    GridGeometry,
    ScalarGrid,
    VectorGrid,
    downsample,
    gradient_values,
    adjoint_gradient_axis,
    identity_positions,
    sample_values,
    splat_values,
    upsample_field,
)
from .kernel import GaussianKernel, MomentumField, smooth_vector
from .optimize import (
    LbfgsHistory,
    LineSearchError,
    lbfgs_direction,
    wolfe_line_search,
)

log = logging.getLogger(__name__)


@dataclass
class TimeSeries:
    """N observed density images with artifact masks and times in [0, 1]."""

    images: list[ScalarGrid]
    masks: list[ScalarGrid]
    times: tuple[float, ...]

    def __post_init__(self):
        if len(self.images) < 2:
            raise GridError("a time series needs at least two observations")
        if len(self.masks) != len(self.images):
            raise GridError("one mask per image required")
        self.times = tuple(float(t) for t in self.times)
        if len(self.times) != len(self.images):
            raise GridError("one time per image required")
        if abs(self.times[0]) > 1e-12 or abs(self.times[-1] - 1.0) > 1e-12:
            raise GridError("observation times must span [0, 1]")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise GridError("observation times must be strictly increasing")
        geo = self.images[0].geometry
        for img, mask in zip(self.images, self.masks):
            if img.geometry != geo or mask.geometry != geo:
                raise GridError("time series fields must share one geometry")
            dens.validate_density(img, "observation")
            if np.any((mask.values < 0) | (mask.values > 1)):
                raise GridError("mask values must lie in [0, 1]")

    @property
    def geometry(self) -> GridGeometry:
        return self.images[0].geometry

    @property
    def n_obs(self) -> int:
        return len(self.images)

    def downsample(self, factor: int) -> "TimeSeries":
        if factor == 1:
            return self
        return TimeSeries(
            [downsample(img, factor) for img in self.images],
            [downsample(m, factor) for m in self.masks],
            self.times,
        )


@dataclass(frozen=True)
class LevelSpec:
    """One multiresolution level: kernel size, downsample factor, data weight."""

    sigma_mm: float
    downsample: int
    gamma: float

    def __post_init__(self):
        if self.sigma_mm <= 0 or self.gamma <= 0 or self.downsample < 1:
            raise GridError(f"invalid level spec {self}")


@dataclass(frozen=True)
class RegressionConfig:
    levels: tuple[LevelSpec, ...]
    mode: str = "gdr"  # gdr | gir
    driver: str = "fot"  # fot | foi
    k: int = 4  # computational time points per observation interval
    epsilon: float = 1e-4  # relative cost-reduction stop threshold
    lbfgs_history: int = 3
    max_iters: int = 200
    warmup_iters: int = 3  # plain gradient-descent iterations before L-BFGS
    template_refine_iters: int = 40
    max_halvings: int = 30

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise GridError("at least one level required")
        if self.mode not in ("gdr", "gir"):
            raise GridError(f"unknown mode {self.mode!r}")
        if self.driver not in ("fot", "foi"):
            raise GridError(f"unknown driver {self.driver!r}")
        if self.epsilon <= 0:
            raise GridError("epsilon must be > 0")
        factors = [lv.downsample for lv in self.levels]
        if any(a < b for a, b in zip(factors, factors[1:])):
            raise GridError("levels must be ordered coarse to fine")


@dataclass
class RegressionResult:
    template: DensityImage
    flow: FlowState
    fitted: list[DensityImage]
    jac_inv_obs: list[ScalarGrid]
    cost_history: list[tuple[int, int, float, float, float]]  # level, iter, metric, data, total
    converged: bool
    warnings: list[str] = field(default_factory=list)

    @property
    def final_cost(self) -> float:
        return self.cost_history[-1][4]


# ---------------------------------------------------------------------------
# objective pieces

def data_term(fits: list[ScalarGrid], ts: TimeSeries, gamma: float,
              use_masks: bool = True) -> float:
    """(1/gamma^2) * sum_i ||fit_i - obs_i||^2 weighted by the masks.

    The mask enters as a quadrature weight; for the 0/1 file masks this is
    identical to masking the residual, and it is the convention whose exact
    minimizer is the closed-form template.
    """
    if gamma <= 0:
        raise GridError(f"gamma must be > 0, got {gamma}")
    if len(fits) != ts.n_obs:
        raise GridError("one fitted image per observation required")
    vol = ts.geometry.voxel_volume
    total = 0.0
    for fit, obs, mask in zip(fits, ts.images, ts.masks):
        resid2 = (fit.values - obs.values) ** 2
        if use_masks:
            resid2 = resid2 * mask.values
        total += float(np.sum(resid2)) * vol
    return total / gamma**2


def total_cost(flow: FlowState, template: DensityImage, ts: TimeSeries,
               gamma: float, mode: str = "gdr") -> tuple[float, float, float]:
    """(metric, data, total) of an iterate; metric uses the flow's momenta."""
    from .kernel import metric_energy

    if flow.momenta is None:
        raise GridError("total_cost needs a flow with momenta attached")
    weights = flow.time_grid.step_weights
    metric = metric_energy(flow.momenta.fields, flow.velocities, weights)
    obs_idx = flow.time_grid.obs_indices
    if mode == "gdr":
        fits = [
            dens.density_action(flow.maps_inv[j], flow.jac_inv[j], template)
            for j in obs_idx
        ]
    else:
        fits = [dens.intensity_action(flow.maps_inv[j], template) for j in obs_idx]
    data = data_term(fits, ts, gamma, use_masks=(mode == "gdr"))
    return metric, data, metric + data


def velocity_gradient(
    momenta: list[VectorGrid],
    states: list[ScalarGrid],
    costate: CostateTrajectory,
    kernel: GaussianKernel,
    mode: str = "gdr",
) -> tuple[list[VectorGrid], list[VectorGrid]]:
    """Raw (momentum-form) and smoothed gradients per time point.

    The raw gradient at point j pairs the state at j with the costate at
    j+1, mirroring the explicit Euler forward step it is adjoint to; the
    final time point carries no gradient (its velocity is unused).
    """
    geo = states[0].geometry
    n = len(momenta)
    raw: list[VectorGrid] = []
    for j in range(n):
        if j == n - 1:
            raw.append(VectorGrid.zeros(geo))
            continue
        lam = costate.values[j + 1].values
        if mode == "gdr":
            comps = [
                states[j].values * adjoint_gradient_axis(lam, geo.spacing[k], k)
                for k in range(geo.ndim)
            ]
        else:
            grads = gradient_values(states[j].values, geo.spacing)
            comps = [-lam * grads[k] for k in range(geo.ndim)]
        raw.append(VectorGrid(geo, momenta[j].values + np.stack(comps, axis=-1)))
    smoothed = [smooth_vector(g, kernel) for g in raw]
    return raw, smoothed


# ---------------------------------------------------------------------------
# template updates

def _template_positions(ts: TimeSeries, flow: FlowState):
    pos = identity_positions(ts.geometry)
    obs_idx = flow.time_grid.obs_indices
    fwd = [pos + flow.maps_fwd[j].values for j in obs_idx]
    inv = [pos + flow.maps_inv[j].values for j in obs_idx]
    return fwd, inv


def _refine_template(
    seed: np.ndarray,
    ts: TimeSeries,
    flow: FlowState,
    mode: str,
    iters: int,
    tol: float = 1e-10,
) -> np.ndarray:
    """Polish the closed-form template to the exact minimizer of the discrete
    data term (preconditioned CG on the normal equations)."""
    geo = ts.geometry
    obs_idx = flow.time_grid.obs_indices
    inv_pos = [identity_positions(geo) + flow.maps_inv[j].values for j in obs_idx]
    if mode == "gdr":
        weights = [
            ts.masks[i].values * flow.jac_inv[obs_idx[i]].values ** 2
            for i in range(ts.n_obs)
        ]
        rhs_pt = [
            ts.masks[i].values * flow.jac_inv[obs_idx[i]].values * ts.images[i].values
            for i in range(ts.n_obs)
        ]
    else:
        weights = [np.ones(geo.dims) for _ in range(ts.n_obs)]
        rhs_pt = [ts.images[i].values for i in range(ts.n_obs)]

    b = np.zeros(geo.dims)
    rowsum = np.zeros(geo.dims)
    for i in range(ts.n_obs):
        b += splat_values(rhs_pt[i], geo, inv_pos[i])
        rowsum += splat_values(weights[i], geo, inv_pos[i])
    support = rowsum > 1e-12
    precond = np.where(support, 1.0 / np.maximum(rowsum, 1e-12), 0.0)

    def apply(x):
        out = np.zeros(geo.dims)
        for i in range(ts.n_obs):
            pulled = sample_values(x, geo, inv_pos[i])
            out += splat_values(weights[i] * pulled, geo, inv_pos[i])
        return out * support

    x = np.where(support, seed, 0.0)
    b = b * support
    r = b - apply(x)
    z = precond * r
    p = z.copy()
    rz = float(np.vdot(r, z))
    bnorm = float(np.vdot(b, b)) or 1.0
    for _ in range(iters):
        if float(np.vdot(r, r)) <= tol**2 * bnorm:
            break
        ap = apply(p)
        pap = float(np.vdot(p, ap))
        if pap <= 0:
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = precond * r
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def update_template_gdr(
    ts: TimeSeries, flow: FlowState, refine_iters: int = 40
) -> DensityImage:
    """Masked density-weighted template average in template coordinates.

    Assembles sum_i (I_i M_i) o phi_i over sum_i (|Dphi_i^-1}| M_i) o phi_i
    with 0/0 defined as 0, then (optionally) polishes the result to the exact
    stationary point of the discrete data term.
    """
    geo = ts.geometry
    obs_idx = flow.time_grid.obs_indices
    fwd_pos, _ = _template_positions(ts, flow)
    num = np.zeros(geo.dims)
    den = np.zeros(geo.dims)
    for i in range(ts.n_obs):
        num += sample_values(ts.images[i].values * ts.masks[i].values, geo, fwd_pos[i])
        den += sample_values(
            flow.jac_inv[obs_idx[i]].values * ts.masks[i].values, geo, fwd_pos[i]
        )
    seed = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
    if refine_iters > 0:
        seed = _refine_template(seed, ts, flow, "gdr", refine_iters)
    return ScalarGrid(geo, seed)


def update_template_gir(
    ts: TimeSeries, flow: FlowState, refine_iters: int = 40
) -> ScalarGrid:
    """Determinant-weighted unmasked template average (baseline)."""
    geo = ts.geometry
    obs_idx = flow.time_grid.obs_indices
    fwd_pos, _ = _template_positions(ts, flow)
    num = np.zeros(geo.dims)
    den = np.zeros(geo.dims)
    for i in range(ts.n_obs):
        det = flow.jac_fwd[obs_idx[i]].values
        num += det * sample_values(ts.images[i].values, geo, fwd_pos[i])
        den += det
    seed = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
    if refine_iters > 0:
        seed = _refine_template(seed, ts, flow, "gir", refine_iters)
    return ScalarGrid(geo, seed)


# ---------------------------------------------------------------------------
# the iteration engine

@dataclass
class _Evaluation:
    total: float
    metric: float
    data: float
    grad: np.ndarray  # raw momentum-form gradient stack, shape (P,) + dims + (d,)
    states: list[ScalarGrid]
    costate: CostateTrajectory
    flow: FlowState | None
    velocities: list[VectorGrid]


class _Problem:
    """One (time series, level) instance: cost, gradient, inner product."""

    def __init__(
        self,
        ts: TimeSeries,
        tg: TimeGrid,
        level: LevelSpec,
        mode: str,
        driver: str,
        template_refine_iters: int,
    ):
        self.ts = ts
        self.tg = tg
        self.level = level
        self.kernel = GaussianKernel(level.sigma_mm)
        self.gamma = level.gamma
        self.mode = mode
        self.driver = driver
        self.template_refine_iters = template_refine_iters
        self.geometry = ts.geometry
        self.weights = tg.step_weights  # (P,)
        ones = ScalarGrid.full(self.geometry, 1.0)
        self.masks = ts.masks if mode == "gdr" else [ones] * ts.n_obs

    # -- stack helpers ------------------------------------------------------
    def zero_stack(self) -> np.ndarray:
        d = self.geometry.ndim
        return np.zeros((self.tg.n_points,) + self.geometry.dims + (d,))

    def fields_of(self, stack: np.ndarray) -> list[VectorGrid]:
        return [VectorGrid(self.geometry, stack[j]) for j in range(stack.shape[0])]

    def smooth_stack(self, stack: np.ndarray) -> list[VectorGrid]:
        return [
            smooth_vector(VectorGrid(self.geometry, stack[j]), self.kernel)
            for j in range(stack.shape[0])
        ]

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """Metric-consistent pairing sum_j dt_j <a_j, K b_j>_{L2}."""
        vol = self.geometry.voxel_volume
        total = 0.0
        for j, w_j in enumerate(self.weights):
            if w_j == 0.0:
                continue
            kb = self.kernel.smooth_values(b[j], self.geometry)
            total += w_j * float(np.vdot(a[j], kb))
        return total * vol

    # -- forward model ------------------------------------------------------
    def flow_of(self, velocities: list[VectorGrid], momenta: MomentumField) -> FlowState:
        return FlowState.from_velocities(velocities, self.tg, momenta)

    def _states_fot(self, template: ScalarGrid, flow: FlowState) -> list[ScalarGrid]:
        if self.mode == "gdr":
            return dens.state_flow_fot(template, flow)
        return dens.intensity_state_flow_fot(template, flow)

    def _states_foi(
        self, template: ScalarGrid, velocities: list[VectorGrid]
    ) -> list[ScalarGrid]:
        step = dens.state_step_foi if self.mode == "gdr" else dens.intensity_state_step_foi
        states = [template]
        dts = self.tg.dts
        for j in range(self.tg.n_points - 1):
            states.append(step(states[j], velocities[j], dts[j]))
        return states

    def _jumps(self, states: list[ScalarGrid]) -> list[ScalarGrid]:
        return [
            dens.costate_terminal(
                states[j], self.ts.images[i], self.masks[i], self.gamma
            )
            for i, j in enumerate(self.tg.obs_indices)
        ]

    def _costate_fot(self, jumps, flow) -> CostateTrajectory:
        if self.mode == "gdr":
            return dens.costate_flow_fot(jumps, flow)
        return dens.intensity_costate_flow_fot(jumps, flow)

    def _costate_foi(self, jumps, velocities) -> CostateTrajectory:
        step = (
            dens.costate_step_foi
            if self.mode == "gdr"
            else dens.intensity_costate_step_foi
        )
        jump_at = dict(zip(self.tg.obs_indices, jumps))
        n = self.tg.n_points
        dts = self.tg.dts
        values: list[ScalarGrid] = [None] * n  # type: ignore[list-item]
        values[n - 1] = jumps[-1]
        for j in range(n - 2, -1, -1):
            lam = step(values[j + 1], velocities[j], dts[j])
            if j in jump_at and j > 0:
                lam = ScalarGrid(self.geometry, lam.values + jump_at[j].values)
            values[j] = lam
        return CostateTrajectory(values, jump_at)

    def evaluate(
        self,
        w_stack: np.ndarray,
        template: ScalarGrid,
        reuse_flow: FlowState | None = None,
    ) -> _Evaluation:
        from .kernel import metric_energy

        w_fields = self.fields_of(w_stack)
        velocities = self.smooth_stack(w_stack)
        momenta = MomentumField(w_fields, velocities, self.kernel)
        metric = metric_energy(w_fields, velocities, self.weights)

        flow: FlowState | None = reuse_flow
        if self.driver == "fot":
            if flow is None:
                flow = self.flow_of(velocities, momenta)
            states = self._states_fot(template, flow)
        else:
            states = self._states_foi(template, velocities)

        fits = [states[j] for j in self.tg.obs_indices]
        data = data_term(fits, self.ts, self.gamma, use_masks=(self.mode == "gdr"))
        jumps = self._jumps(states)
        if self.driver == "fot":
            costate = self._costate_fot(jumps, flow)
        else:
            costate = self._costate_foi(jumps, velocities)
        raw, _ = velocity_gradient(w_fields, states, costate, self.kernel, self.mode)
        # smoothing deferred to the inner product; stack the raw gradient
        grad = np.stack([g.values for g in raw])
        return _Evaluation(metric + data, metric, data, grad, states, costate, flow, velocities)

    def update_template(self, flow: FlowState) -> ScalarGrid:
        if self.mode == "gdr":
            return update_template_gdr(self.ts, flow, self.template_refine_iters)
        return update_template_gir(self.ts, flow, self.template_refine_iters)


@dataclass
class _LevelOutput:
    w_stack: np.ndarray
    template: ScalarGrid
    evaluation: _Evaluation
    cost_rows: list[tuple[int, int, float, float, float]]
    converged: bool
    warnings: list[str]


def _run_level(
    ts: TimeSeries,
    config: RegressionConfig,
    level: LevelSpec,
    level_index: int,
    init_w: np.ndarray | None = None,
    init_template: ScalarGrid | None = None,
) -> _LevelOutput:
    tg = TimeGrid(ts.times, config.k)
    prob = _Problem(ts, tg, level, config.mode, config.driver,
                    config.template_refine_iters)
    w = prob.zero_stack() if init_w is None else np.array(init_w, dtype=float)
    if w.shape != prob.zero_stack().shape:
        raise GridError(f"initial momenta have shape {w.shape}")

    warm = init_w is not None and np.any(w != 0.0)
    if init_template is not None:
        template = init_template
    elif warm:
        velocities = prob.smooth_stack(w)
        momenta = MomentumField(prob.fields_of(w), velocities, prob.kernel)
        template = prob.update_template(prob.flow_of(velocities, momenta))
    else:
        template = ScalarGrid(ts.geometry, ts.images[0].values.copy())

    ev = prob.evaluate(w, template)
    rows = [(level_index, 0, ev.metric, ev.data, ev.total)]
    history = LbfgsHistory(config.lbfgs_history)
    warnings: list[str] = []
    converged = False

    for it in range(1, config.max_iters + 1):
        grad_norm2 = prob.inner(ev.grad, ev.grad)
        if grad_norm2 <= 1e-30:
            converged = True
            break
        direction = None
        if it > config.warmup_iters and len(history) > 0:
            direction = lbfgs_direction(history, ev.grad, prob.inner)
            if prob.inner(direction, ev.grad) >= 0.0:
                direction = None  # fall back to steepest descent
        if direction is None:
            direction = -ev.grad
        try:
            ls = wolfe_line_search(
                lambda x: prob.evaluate(x, template),
                w,
                direction,
                ev.total,
                ev.grad,
                prob.inner,
                max_halvings=config.max_halvings,
                reject=(FlowError,),
            )
        except LineSearchError as exc:
            warnings.append(f"level {level_index} iter {it}: line search stopped ({exc})")
            log.warning(warnings[-1])
            break
        new_ev: _Evaluation = ls.evaluation  # type: ignore[assignment]
        history.push(ls.x - w, new_ev.grad - ev.grad, prob.inner)
        w = ls.x
        prev_total = ev.total

        # template update follows the velocity update within each iteration
        if new_ev.flow is not None:
            flow = new_ev.flow
        else:
            momenta = MomentumField(
                prob.fields_of(w), new_ev.velocities, prob.kernel
            )
            flow = prob.flow_of(new_ev.velocities, momenta)
        template = prob.update_template(flow)
        ev = prob.evaluate(w, template, reuse_flow=flow if config.driver == "fot" else None)
        rows.append((level_index, it, ev.metric, ev.data, ev.total))

        reduction = (prev_total - ev.total) / max(prev_total, 1e-30)
        if reduction < config.epsilon:
            converged = True
            break

    return _LevelOutput(w, template, ev, rows, converged, warnings)


def _finalize(
    ts: TimeSeries, config: RegressionConfig, out: _LevelOutput
) -> RegressionResult:
    tg = TimeGrid(ts.times, config.k)
    prob = _Problem(ts, tg, config.levels[-1], config.mode, config.driver,
                    config.template_refine_iters)
    velocities = prob.smooth_stack(out.w_stack)
    momenta = MomentumField(prob.fields_of(out.w_stack), velocities, prob.kernel)
    flow = FlowState.from_velocities(velocities, tg, momenta, check_consistency=True)
    if flow.diagnostics["nonpositive_jac_voxels"] > 0:
        raise GridError(
            "regression produced a folded transformation: "
            f"{flow.diagnostics['nonpositive_jac_voxels']} voxels with det <= 0"
        )
    obs_idx = tg.obs_indices
    if config.mode == "gdr":
        fits = [
            dens.density_action(flow.maps_inv[j], flow.jac_inv[j], out.template)
            for j in obs_idx
        ]
    else:
        fits = [dens.intensity_action(flow.maps_inv[j], out.template) for j in obs_idx]
    jac_obs = [flow.jac_inv[j] for j in obs_idx]
    return RegressionResult(
        out.template, flow, fits, jac_obs, out.cost_rows, out.converged, out.warnings
    )


def run_fot(
    ts: TimeSeries,
    config: RegressionConfig,
    level: LevelSpec | None = None,
    init_w: np.ndarray | None = None,
    init_template: ScalarGrid | None = None,
) -> RegressionResult:
    """Single-level composition-based driver on a series already at level
    geometry."""
    cfg = replace(config, driver="fot")
    out = _run_level(ts, cfg, level or cfg.levels[-1], 0, init_w, init_template)
    return _finalize(ts, cfg, out)


def run_foi(
    ts: TimeSeries,
    config: RegressionConfig,
    level: LevelSpec | None = None,
    init_w: np.ndarray | None = None,
    init_template: ScalarGrid | None = None,
) -> RegressionResult:
    """Single-level PDE-stepped driver (documented to degrade on
    high-frequency content; the composition driver is the default)."""
    cfg = replace(config, driver="foi")
    out = _run_level(ts, cfg, level or cfg.levels[-1], 0, init_w, init_template)
    return _finalize(ts, cfg, out)


def run_multiresolution(ts: TimeSeries, config: RegressionConfig) -> RegressionResult:
    """Coarse-to-fine continuation.

    The final velocity fields of each level are upsampled and re-expressed
    as the next level's initial momenta (the velocity is the stable quantity
    across kernel changes: momenta may carry high-frequency content that the
    coarse kernel suppressed but a finer kernel would re-expose).  The
    template is re-estimated at the start of each warm-started level.
    """
    all_rows: list[tuple[int, int, float, float, float]] = []
    all_warnings: list[str] = []
    v_prev: list[VectorGrid] | None = None
    out: _LevelOutput | None = None
    ts_level = None
    for li, level in enumerate(config.levels):
        ts_level = ts.downsample(level.downsample)
        geo = ts_level.geometry
        init_w = None
        if v_prev is not None:
            init_w = np.stack(
                [upsample_field(v, geo).values for v in v_prev]
            )
        out = _run_level(ts_level, config, level, li, init_w=init_w)
        all_rows.extend(out.cost_rows)
        all_warnings.extend(out.warnings)
        v_prev = out.evaluation.velocities
    assert out is not None and ts_level is not None
    out = _LevelOutput(
        out.w_stack, out.template, out.evaluation, all_rows, out.converged, all_warnings
    )
    return _finalize(ts_level, config, out)
