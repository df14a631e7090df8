"""Two-parameter combined inference over both data sources.

The observational and trial sensitivity p-values use disjoint sources of
randomness, so their product behaves like a product of independent
(super-)uniform p-values under the null.  A hypothesized effect is kept
when the product stays at or above kappa_alpha = exp(-q/2), with q the
(1-alpha) quantile of a 4-df chi-square: minus twice the log of a product
of two independent uniforms has exactly that distribution.

Each confidence limit scans a shared effect grid with monotone-envelope
p-value curves for both sources (the upper limit uses the less-than-tail
curves, which decrease in the hypothesized effect, so the kept set is a
left ray and its supremum is the limit), then sharpens the boundary by
bisection.  All grid points share one set of assignment draws, which
keeps the kept set an interval instead of a Monte Carlo speckle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .os_sens import LOWER, UPPER, OsPValueCurve, SetData, os_ci
from .rct_infer import RctDesign, RctPValueCurve, draw_assignments, rct_ci
from .results import IntervalResult
from .stat_kernel import SeededRng, chi2_4_quantile

__all__ = [
    "CombinedResult",
    "CombinedError",
    "kappa_alpha",
    "combined_limit",
    "combined_ci",
]


class CombinedError(ValueError):
    pass


@dataclass(frozen=True)
class CombinedResult:
    lower: float
    upper: float
    alpha: float
    gamma: float
    delta: float
    kappa: float
    os_interval: IntervalResult
    rct_interval: IntervalResult

    @property
    def interval(self) -> IntervalResult:
        return IntervalResult(
            lower=self.lower,
            upper=self.upper,
            method="combined",
            alpha=self.alpha,
            diagnostics={"gamma": self.gamma, "delta": self.delta, "kappa": self.kappa},
        )


def kappa_alpha(alpha: float) -> float:
    """Product-of-p-values cutoff; satisfies kappa * (1 - ln kappa) = alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha}")
    return math.exp(-chi2_4_quantile(1.0 - alpha) / 2.0)


class _UnitCurve:
    """Stand-in p-value curve that is identically one (an uninformative source)."""

    def envelope(self, beta0, delta: float = 0.0, envelope_points: int = 201):
        return np.ones_like(np.atleast_1d(np.asarray(beta0, dtype=float)))


def _product(os_curve, rct_curve, beta: np.ndarray, delta: float, envelope_points: int) -> np.ndarray:
    p_os = os_curve.envelope(beta)
    p_rct = rct_curve.envelope(beta, delta=delta, envelope_points=envelope_points)
    return np.asarray(p_os) * np.asarray(p_rct)


def _boundary_from_grid(
    os_curve,
    rct_curve,
    delta: float,
    kappa: float,
    grid: np.ndarray,
    keep_side: str,
    refine_tol: float,
    envelope_points: int = 201,
) -> float:
    """Edge of the kept region {product >= kappa} on the grid, bisection-refined.

    keep_side is "left" when the kept set is a left ray (upper limit) and
    "right" for a right ray (lower limit).
    """
    accepted = _product(os_curve, rct_curve, grid, delta, envelope_points) >= kappa
    idx = np.flatnonzero(accepted)
    if idx.size == 0:
        raise CombinedError(
            "no hypothesized effect on the grid attains the combined cutoff; "
            "the grid may miss the acceptance region"
        )
    if idx.size == grid.size:
        span = grid[-1] - grid[0]
        wider = (
            np.linspace(grid[0] - span, grid[0], grid.size // 2 + 1)
            if keep_side == "right"
            else np.linspace(grid[-1], grid[-1] + span, grid.size // 2 + 1)
        )
        accepted_ext = _product(os_curve, rct_curve, wider, delta, envelope_points) >= kappa
        if accepted_ext.all():
            raise CombinedError("every grid point is accepted even after extending the grid")
        grid = np.concatenate([grid, wider[1:]]) if keep_side == "left" else np.concatenate(
            [wider[:-1], grid]
        )
        grid = np.sort(grid)
        accepted = _product(os_curve, rct_curve, grid, delta, envelope_points) >= kappa
        idx = np.flatnonzero(accepted)
    if not np.array_equal(idx, np.arange(idx[0], idx[-1] + 1)):
        raise CombinedError("combined acceptance region is not an interval on the grid")
    if keep_side == "left":
        inside, outside = grid[idx[-1]], None
        if idx[-1] + 1 < grid.size:
            outside = grid[idx[-1] + 1]
    else:
        inside, outside = grid[idx[0]], None
        if idx[0] > 0:
            outside = grid[idx[0] - 1]
    if outside is None:
        return float(inside)
    lo, hi = (inside, outside) if keep_side == "left" else (outside, inside)
    # bisection: keep the invariant that one end is accepted, the other rejected
    while hi - lo > refine_tol:
        mid = 0.5 * (lo + hi)
        ok = bool(_product(os_curve, rct_curve, np.array([mid]), delta, envelope_points)[0] >= kappa)
        if keep_side == "left":
            lo, hi = (mid, hi) if ok else (lo, mid)
        else:
            lo, hi = (lo, mid) if ok else (mid, hi)
    return float(lo if keep_side == "left" else hi)


def combined_limit(
    os_sets: list[SetData],
    rct_design: RctDesign | None,
    gamma: float,
    delta: float,
    alpha: float,
    direction: str,
    mc_samples: int = 10_000,
    rng: SeededRng | None = None,
    assignments: np.ndarray | None = None,
    grid: np.ndarray | None = None,
    refine_tol: float | None = None,
    envelope_points: int = 201,
) -> float:
    """One-sided combined confidence limit at level (1 - alpha).

    direction UPPER returns the upper limit (supremum of the kept set,
    computed from less-than-tail p-values); LOWER returns the lower limit.
    Passing ``rct_design=None`` treats the trial factor as identically one,
    which reduces the limit to an observational inversion at the kappa
    cutoff.
    """
    if direction not in (UPPER, LOWER):
        raise ValueError(f"unknown direction {direction!r}")
    kappa = kappa_alpha(alpha)
    tail = LOWER if direction == UPPER else UPPER
    os_curve = OsPValueCurve(os_sets, gamma, tail, envelope_points=envelope_points)
    if rct_design is None:
        rct_curve = _UnitCurve()
    else:
        if assignments is None:
            if rng is None:
                raise ValueError("provide either assignments or an rng")
            assignments = draw_assignments(rct_design, rng, mc_samples)
        rct_curve = RctPValueCurve(rct_design, assignments, tail)
    if grid is None:
        grid = default_combined_grid(os_sets, rct_design, assignments, delta)
    if refine_tol is None:
        y_all = np.concatenate([s.y for s in os_sets])
        refine_tol = 1e-4 * max(float(np.std(y_all)), 1e-8)
    keep_side = "left" if direction == UPPER else "right"
    return _boundary_from_grid(
        os_curve, rct_curve, delta, kappa, grid, keep_side, refine_tol, envelope_points
    )


def default_combined_grid(
    os_sets: list[SetData],
    rct_design: RctDesign | None,
    assignments: np.ndarray | None,
    delta: float,
    points: int = 401,
    span_sd: float = 8.0,
) -> np.ndarray:
    """Shared effect grid: centered between the two point estimates and wide
    enough for both sources plus the delta widening."""
    d = np.array(
        [s.y[s.treated_index] - (s.y.sum() - s.y[s.treated_index]) / (s.y.size - 1) for s in os_sets]
    )
    centers = [float(d.mean())]
    scales = [float(d.std(ddof=1)) / math.sqrt(d.size) if d.size > 1 else 1.0]
    if rct_design is not None and assignments is not None:
        curve = RctPValueCurve(rct_design, assignments, UPPER)
        num = curve._a_obs - float(curve._a_s.mean())
        den = curve._b_obs - float(curve._b_s.mean())
        if abs(den) > 1e-12:
            centers.append(num / den)
        scales.append(float(curve._scale(np.array([centers[-1]]))[0]))
    center = 0.5 * (min(centers) + max(centers))
    half = span_sd * max(scales) + (max(centers) - min(centers)) + delta
    return np.linspace(center - half, center + half, points)


def combined_ci(
    os_sets: list[SetData],
    rct_design: RctDesign | None,
    gamma: float,
    delta: float,
    alpha: float = 0.05,
    mc_samples: int = 10_000,
    rng: SeededRng | None = None,
    assignments: np.ndarray | None = None,
    grid: np.ndarray | None = None,
    envelope_points: int = 201,
) -> CombinedResult:
    """Two-sided combined interval from the two one-sided limits at alpha/2,
    with the standalone intervals at the same level attached for reporting."""
    if rct_design is not None and assignments is None:
        if rng is None:
            raise ValueError("provide either assignments or an rng")
        assignments = draw_assignments(rct_design, rng, mc_samples)
    if grid is None:
        grid = default_combined_grid(os_sets, rct_design, assignments, delta)
    common = dict(
        gamma=gamma,
        delta=delta,
        alpha=alpha / 2.0,
        assignments=assignments,
        grid=grid,
        envelope_points=envelope_points,
    )
    lower = combined_limit(os_sets, rct_design, direction=LOWER, **common)
    upper = combined_limit(os_sets, rct_design, direction=UPPER, **common)
    os_interval = os_ci(os_sets, gamma, alpha=alpha / 2.0)
    if rct_design is not None:
        rct_interval = rct_ci(rct_design, delta, alpha=alpha, assignments=assignments)
    else:
        rct_interval = IntervalResult(
            lower=-math.inf, upper=math.inf, method="rct", alpha=alpha,
            diagnostics={"note": "no RCT design; trial factor treated as one"},
        )
    return CombinedResult(
        lower=lower,
        upper=upper,
        alpha=alpha,
        gamma=gamma,
        delta=delta,
        kappa=kappa_alpha(alpha / 2.0),
        os_interval=os_interval,
        rct_interval=rct_interval,
    )
