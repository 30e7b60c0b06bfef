"""L-BFGS direction (two-loop recursion) and strong Wolfe halving search.

The routines are generic over numpy arrays of any shape: the caller supplies
the inner product, which for the regression is the metric-consistent pairing
between momentum stacks (so that ``inner(direction, raw_gradient)`` equals
the true directional derivative of the cost).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

InnerProduct = Callable[[np.ndarray, np.ndarray], float]

CURVATURE_GUARD = 1e-12


class LineSearchError(RuntimeError):
    pass


class NonDescentDirection(LineSearchError):
    pass


@dataclass
class LbfgsHistory:
    """Ring buffer of (position delta, gradient delta, 1/<y,s>) triples.

    Pairs with ``<y, s> <= CURVATURE_GUARD`` are rejected at push time so the
    two-loop recursion never divides by a non-positive curvature.
    """

    m: int
    pairs: list[tuple[np.ndarray, np.ndarray, float]] = field(default_factory=list)
    rejected: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    def push(self, s: np.ndarray, y: np.ndarray, inner: InnerProduct) -> bool:
        ys = inner(y, s)
        if not np.isfinite(ys) or ys <= CURVATURE_GUARD:
            self.rejected += 1
            return False
        self.pairs.append((s, y, 1.0 / ys))
        if len(self.pairs) > self.m:
            self.pairs.pop(0)
        return True


def lbfgs_direction(
    history: LbfgsHistory, grad: np.ndarray, inner: InnerProduct
) -> np.ndarray:
    """Two-loop recursion estimate of the descent direction.

    Raises ``ValueError`` on an empty history; the caller falls back to
    steepest descent in that case.
    """
    if len(history) == 0:
        raise ValueError("empty L-BFGS history; use steepest descent")
    q = grad.copy()
    alphas: list[float] = []
    for s, y, rho in reversed(history.pairs):
        alpha = rho * inner(s, q)
        q -= alpha * y
        alphas.append(alpha)
    s_last, y_last, _ = history.pairs[-1]
    gamma = inner(s_last, y_last) / inner(y_last, y_last)
    z = gamma * q
    for (s, y, rho), alpha in zip(history.pairs, reversed(alphas)):
        beta = rho * inner(y, z)
        z += s * (alpha - beta)
    return -z


@dataclass
class LineSearchResult:
    step: float
    x: np.ndarray
    evaluation: object  # caller-defined; must expose .total and .grad
    n_evals: int


def wolfe_line_search(
    evaluate: Callable[[np.ndarray], object],
    x: np.ndarray,
    direction: np.ndarray,
    f0: float,
    g0: np.ndarray,
    inner: InnerProduct,
    c1: float = 1e-4,
    c2: float = 0.9,
    max_halvings: int = 30,
    reject: tuple[type[BaseException], ...] = (),
) -> LineSearchResult:
    """Halve the step from s = 1 until both strong Wolfe inequalities hold.

    (1) f(x + s Z) <= f(x) + c1 * s * <Z, g0>
    (2) |<Z, g(x + s Z)>| <= |c2 * <Z, g0>|

    ``evaluate`` must return an object with ``total`` (cost) and ``grad``
    attributes; exceptions listed in ``reject`` (e.g. a folded transformation
    at an overlong step) count as a failed probe and trigger another halving.
    Raises :class:`NonDescentDirection` when ``<Z, g0> >= 0`` and
    :class:`LineSearchError` when the halving budget is exhausted.
    """
    dphi0 = inner(direction, g0)
    if not np.isfinite(dphi0) or dphi0 >= 0.0:
        raise NonDescentDirection(f"<Z, g> = {dphi0:.3e} is not a descent pairing")
    step = 1.0
    n_evals = 0
    for _ in range(max_halvings + 1):
        cand = x + step * direction
        try:
            ev = evaluate(cand)
        except reject:
            step *= 0.5
            continue
        n_evals += 1
        sufficient = np.isfinite(ev.total) and ev.total <= f0 + c1 * step * dphi0
        if sufficient:
            curvature = abs(inner(direction, ev.grad)) <= abs(c2 * dphi0)
            if curvature:
                return LineSearchResult(step, cand, ev, n_evals)
        step *= 0.5
    raise LineSearchError(
        f"no step satisfied the strong Wolfe conditions after {max_halvings} halvings"
    )
