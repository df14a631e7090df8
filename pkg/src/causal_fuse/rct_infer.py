"""Design-based inference for the trial arm of the matched design.

The estimator is a copy-weighted Horvitz-Thompson contrast: each trial
unit enters with the number of matched sets that retained it, its outcome
inverse-weighted by the known assignment probability.  Tests are Monte
Carlo randomization tests under constant-effect imputation: hypothesizing
an effect b, the treated outcomes are shifted by -b to recover the
control-scale outcomes, and the statistic is recomputed under resampled
assignments.  A generalizability bound delta >= 0 shifts the hypothesized
effect toward the unfavorable side before testing (equivalently: the
inverted interval widens by delta on each end), which keeps the test
valid when the trial-supported region's effect differs from the target
estimand by at most delta.

Because the statistic is linear in the hypothesized effect for every
assignment draw, a whole p-value curve reduces to counting sign-crossing
ratios; ``RctPValueCurve`` stores the sorted ratios once and answers any
query in logarithmic time, with all queries sharing the same draws
(common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .results import IntervalResult
from .os_sens import LOWER, UPPER
from .stat_kernel import SeededRng
from .study_data import OS, RCT, StudyData
from .tri_match import MatchedSet

__all__ = [
    "BERNOULLI",
    "COMPLETE",
    "BLOCKED",
    "RctUnit",
    "RctDesign",
    "RctTestResult",
    "build_rct_design",
    "rct_estimate",
    "draw_assignments",
    "RctPValueCurve",
    "rct_test",
    "rct_ci",
    "delta_rescalings",
]

BERNOULLI = "bernoulli"
COMPLETE = "complete"
BLOCKED = "blocked"


@dataclass(frozen=True)
class RctUnit:
    id: str
    z: int
    y: float
    theta: float
    copies: int
    block: str | None = None


@dataclass(frozen=True)
class RctDesign:
    units: tuple[RctUnit, ...]
    scheme: str = BERNOULLI

    def __post_init__(self):
        if self.scheme not in (BERNOULLI, COMPLETE, BLOCKED):
            raise ValueError(f"unknown randomization scheme {self.scheme!r}")
        if not self.units:
            raise ValueError("RCT design has no units")
        for u in self.units:
            if not 0.0 < u.theta < 1.0:
                raise ValueError(f"assignment probability must be in (0,1) for unit {u.id!r}")
            if u.copies < 1:
                raise ValueError(f"copies must be >= 1 for unit {u.id!r}")
            if u.z not in (0, 1):
                raise ValueError(f"treatment must be 0/1 for unit {u.id!r}")
        if self.scheme == BLOCKED:
            blocks: dict[str | None, list[int]] = {}
            for u in self.units:
                blocks.setdefault(u.block, []).append(u.z)
            for label, zs in blocks.items():
                if 0 not in zs or 1 not in zs:
                    raise ValueError(
                        f"blocked design needs a treated and a control unit in block {label!r}"
                    )

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        z = np.array([u.z for u in self.units], dtype=float)
        y = np.array([u.y for u in self.units], dtype=float)
        theta = np.array([u.theta for u in self.units], dtype=float)
        c = np.array([u.copies for u in self.units], dtype=float)
        return z, y, theta, c


@dataclass(frozen=True)
class RctTestResult:
    observed_statistic: float
    mc_samples: int
    mc_quantiles: tuple[float, float, float]  # 2.5%, 50%, 97.5% of the null draws
    p_value: float
    direction: str


def build_rct_design(
    data: StudyData,
    matched_sets: list[MatchedSet],
    scheme: str = BERNOULLI,
    theta: float | None = None,
) -> RctDesign:
    """Trial design from the retained matched sets.

    A unit's copy count is the number of sets that kept it; units whose
    copies were all matched to imaginary treated units drop out.  The
    assignment probability is ``theta`` for Bernoulli schemes and the
    observed (block) treated fraction otherwise.
    """
    multiplicity: dict[str, int] = {}
    for ms in matched_sets:
        if ms.rct_id is not None:
            multiplicity[ms.rct_id] = multiplicity.get(ms.rct_id, 0) + 1
    if not multiplicity:
        raise ValueError("no matched sets retained an RCT unit")
    by_id = data.by_id()
    units = []
    records = [by_id[uid] for uid in multiplicity]
    if scheme == BERNOULLI:
        if theta is None:
            theta = 0.5
        thetas = {rec.id: theta for rec in records}
    elif scheme == COMPLETE:
        frac = sum(r.z for r in records) / len(records)
        thetas = {rec.id: (theta if theta is not None else frac) for rec in records}
    else:  # BLOCKED: per-block observed treated fraction
        blocks: dict[str | None, list] = {}
        for rec in records:
            blocks.setdefault(rec.block, []).append(rec)
        thetas = {}
        for members in blocks.values():
            frac = sum(r.z for r in members) / len(members)
            for rec in members:
                thetas[rec.id] = theta if theta is not None else frac
    for rec in sorted(records, key=lambda r: r.id):
        if rec.source != RCT:
            raise ValueError(f"matched set references non-RCT unit {rec.id!r} as its anchor")
        units.append(
            RctUnit(
                id=rec.id,
                z=rec.z,
                y=rec.y,
                theta=thetas[rec.id],
                copies=multiplicity[rec.id],
                block=rec.block,
            )
        )
    return RctDesign(units=tuple(units), scheme=scheme)


def rct_estimate(design: RctDesign) -> float:
    """Copy-weighted inverse-probability contrast of treated and control means."""
    z, y, theta, c = design.arrays()
    if z.min() == z.max():
        raise ValueError("estimate needs both a treated and a control unit")
    terms = z * y / theta - (1.0 - z) * y / (1.0 - theta)
    return float((c * terms).sum() / c.sum())


def draw_assignments(design: RctDesign, rng: SeededRng | np.random.Generator, count: int) -> np.ndarray:
    """S resampled assignment vectors, (S, n) with entries 0/1.

    BERNOULLI draws each unit independently at its own probability;
    COMPLETE permutes the observed treated count uniformly (requires a
    common probability); BLOCKED does the same within each block.
    """
    gen = rng.generator() if isinstance(rng, SeededRng) else rng
    z, _, theta, _ = design.arrays()
    n = len(design.units)
    if design.scheme == BERNOULLI:
        return (gen.random((count, n)) < theta[None, :]).astype(np.int8)
    if design.scheme == COMPLETE:
        if np.unique(theta).size != 1:
            raise ValueError("complete randomization requires a common assignment probability")
        k = int(z.sum())
        ranks = np.argsort(gen.random((count, n)), axis=1)
        return (ranks < k).astype(np.int8)
    # BLOCKED
    out = np.zeros((count, n), dtype=np.int8)
    labels = [u.block for u in design.units]
    for label in sorted(set(labels), key=lambda b: ("", b) if b is None else ("b", b)):
        idx = np.array([i for i, b in enumerate(labels) if b == label])
        k = int(z[idx].sum())
        ranks = np.argsort(gen.random((count, idx.size)), axis=1)
        out[:, idx] = (ranks < k).astype(np.int8)
    return out


class RctPValueCurve:
    """Randomization p-value as a function of the hypothesized effect.

    One curve per direction; the delta bound enters at query time as a
    shift of the hypothesized effect toward the conservative side.  The
    statistic under draw s at null c is T_s(c) = A_s - a0 - c (B_s - b0),
    so the count of draws beating the observed statistic changes only at
    the ratio points (A_s - A_obs)/(B_s - B_obs); sorting those once
    makes every query a binary search.
    """

    def __init__(self, design: RctDesign, assignments: np.ndarray, direction: str = UPPER):
        if direction not in (UPPER, LOWER):
            raise ValueError(f"unknown direction {direction!r}")
        self.direction = direction
        self._sign = 1.0 if direction == UPPER else -1.0
        z, y, theta, c = design.arrays()
        if z.min() == z.max():
            raise ValueError("randomization test needs both a treated and a control unit")
        y = self._sign * y
        total = c.sum()
        w1 = c / theta / total  # weight when a draw treats the unit
        w0 = c / (1.0 - theta) / total  # weight when it does not
        w = w1 + w0
        self._a_obs = float(z @ (w * y)) - float(w0 @ y)
        self._b_obs = float(z @ (w * z)) - float(w0 @ z)
        self.mc_samples = int(assignments.shape[0])
        # difference the assignments BEFORE projecting so a draw identical to
        # the observed assignment ties the observed statistic exactly
        dz = assignments.astype(float) - z[None, :]
        da = dz @ (w * y)
        db = dz @ (w * z)
        self._a_s = self._a_obs + da
        self._b_s = self._b_obs + db
        pos = db > 0
        neg = db < 0
        zero = ~pos & ~neg
        self._ratio_pos = np.sort(da[pos] / db[pos])  # draw ties/beats obs iff c <= ratio
        self._ratio_neg = np.sort(da[neg] / db[neg])  # draw ties/beats obs iff c >= ratio
        self._n_zero_beat = int((da[zero] >= 0).sum())

    def _null_shift(self, beta0: np.ndarray, delta: float) -> np.ndarray:
        # In the sign-flipped (upper) space the conservative null is c = beta + delta.
        return self._sign * np.atleast_1d(np.asarray(beta0, dtype=float)) + delta

    def observed(self, beta0: float, delta: float = 0.0) -> float:
        c = float(self._null_shift(np.array([beta0]), delta)[0])
        return self._a_obs - c * self._b_obs

    def null_draws(self, beta0: float, delta: float = 0.0) -> np.ndarray:
        c = float(self._null_shift(np.array([beta0]), delta)[0])
        return self._a_s - c * self._b_s

    def _count_at_least(self, c: np.ndarray) -> np.ndarray:
        """#{draws with T_s(c) >= T_obs(c)} at each null value.

        Ties count: with atoms in the null distribution a strict
        inequality would make constant data look significant.
        """
        n_pos = self._ratio_pos.size - np.searchsorted(self._ratio_pos, c, side="left")
        n_neg = np.searchsorted(self._ratio_neg, c, side="right")
        return n_pos + n_neg + self._n_zero_beat

    def raw(self, beta0: np.ndarray, delta: float = 0.0) -> np.ndarray:
        """(1 + #draws at or above the observed) / (S + 1) at each query."""
        c = self._null_shift(beta0, delta)
        return (1.0 + self._count_at_least(c)) / (self.mc_samples + 1.0)

    def _scale(self, c: np.ndarray) -> np.ndarray:
        va = float(np.var(self._a_s))
        vb = float(np.var(self._b_s))
        cab = float(np.mean(self._a_s * self._b_s) - self._a_s.mean() * self._b_s.mean())
        return np.sqrt(np.maximum(va - 2.0 * c * cab + c**2 * vb, 1e-300))

    def envelope(
        self,
        beta0: np.ndarray,
        delta: float = 0.0,
        envelope_points: int = 201,
        span_se: float = 6.0,
    ) -> np.ndarray:
        """Running maximum of the raw p over a trailing window, as for the OS curve."""
        c = self._null_shift(beta0, delta)
        scale = self._scale(c)
        offsets = np.linspace(span_se, 0.0, envelope_points)
        grid = c[:, None] - scale[:, None] * offsets[None, :]
        p = (1.0 + self._count_at_least(grid)) / (self.mc_samples + 1.0)
        return p.max(axis=1)


def rct_test(
    design: RctDesign,
    beta0: float,
    delta: float,
    direction: str,
    mc_samples: int = 10_000,
    rng: SeededRng | np.random.Generator | None = None,
    assignments: np.ndarray | None = None,
) -> RctTestResult:
    """Monotone-envelope randomization test of one hypothesized effect."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if assignments is None:
        if mc_samples < 99:
            raise ValueError("need at least 99 Monte Carlo samples")
        if rng is None:
            raise ValueError("provide either assignments or an rng")
        assignments = draw_assignments(design, rng, mc_samples)
    curve = RctPValueCurve(design, assignments, direction)
    p = float(curve.envelope(np.array([beta0]), delta=delta)[0])
    draws = curve.null_draws(beta0, delta)
    quantiles = tuple(float(q) for q in np.quantile(draws, [0.025, 0.5, 0.975]))
    return RctTestResult(
        observed_statistic=curve.observed(beta0, delta),
        mc_samples=curve.mc_samples,
        mc_quantiles=quantiles,
        p_value=p,
        direction=direction,
    )


def _hl_estimate(curve: RctPValueCurve) -> float:
    """Effect where the observed statistic equals the Monte Carlo mean."""
    num = curve._a_obs - float(curve._a_s.mean())
    den = curve._b_obs - float(curve._b_s.mean())
    if abs(den) < 1e-12:
        raise ValueError("cannot center the statistic: degenerate draw weights")
    return num / den


def rct_ci(
    design: RctDesign,
    delta: float,
    alpha: float = 0.05,
    mc_samples: int = 10_000,
    rng: SeededRng | np.random.Generator | None = None,
    assignments: np.ndarray | None = None,
    grid_points: int = 401,
    span_sd: float = 8.0,
) -> IntervalResult:
    """Invert the two-sided randomization test, then widen by delta.

    Null outcomes are imputed once under a constant effect equal to the
    centering estimate, so the null draws are a single fixed sample and
    the observed statistic sweeps across their [alpha/2, 1-alpha/2]
    quantiles; all grid points share the draws, so the accepted set is an
    interval.
    """
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha}")
    if assignments is None:
        if rng is None:
            raise ValueError("provide either assignments or an rng")
        assignments = draw_assignments(design, rng, mc_samples)
    curve = RctPValueCurve(design, assignments, UPPER)
    point = _hl_estimate(curve)
    t_null = curve._a_s - point * curve._b_s
    q_lo = float(np.quantile(t_null, alpha / 2.0, method="lower"))
    q_hi = float(np.quantile(t_null, 1.0 - alpha / 2.0, method="higher"))
    sd = float(np.std(t_null))
    if sd == 0.0:
        # degenerate null distribution: the only accepted effect is the center
        return IntervalResult(
            lower=point - delta,
            upper=point + delta,
            method="rct",
            alpha=alpha,
            point_estimate=point,
            diagnostics={"delta": delta, "degenerate": True, "mc_samples": curve.mc_samples},
        )
    grid = np.linspace(point - span_sd * sd, point + span_sd * sd, grid_points)
    t_obs = curve._a_obs - grid * curve._b_obs
    accepted = (t_obs >= q_lo) & (t_obs <= q_hi)
    if not accepted.any():
        raise ValueError(
            "empty acceptance region when inverting the randomization test; "
            "increase grid_points or span_sd"
        )
    idx = np.flatnonzero(accepted)
    lower = float(grid[idx[0]])
    upper = float(grid[idx[-1]])
    return IntervalResult(
        lower=lower - delta,
        upper=upper + delta,
        method="rct",
        alpha=alpha,
        point_estimate=point,
        diagnostics={
            "delta": delta,
            "grid_points": grid_points,
            "accepted_points": int(idx.size),
            "mc_samples": curve.mc_samples,
        },
    )


def delta_rescalings(
    delta: float,
    data: StudyData,
    matched_sets: list[MatchedSet] | None = None,
) -> tuple[float | None, float]:
    """Interpretability rescalings of the generalizability bound.

    delta_tilde divides by the fraction of OS treated units outside the
    overlap region (None means complete overlap makes it undefined);
    delta_prime divides by the root of the summed matched-arm outcome
    variances, giving a scale-free version.
    """
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if delta == 0.0:
        return 0.0, 0.0
    _, _, n_plus, n_minus = data.counts
    n_treated = n_plus + n_minus
    if n_treated == 0:
        raise ValueError("no OS treated units")
    fraction_outside = n_minus / n_treated
    delta_tilde = None if fraction_outside == 0.0 else delta / fraction_outside
    by_id = data.by_id()
    if matched_sets is not None:
        treated_y = np.array([by_id[s.treated_id].y for s in matched_sets])
        control_y = np.array([by_id[c].y for s in matched_sets for c in s.control_ids])
    else:
        treated_y = np.array([r.y for r in data.records if r.source == OS and r.z == 1])
        control_y = np.array([r.y for r in data.records if r.source == OS and r.z == 0])
    var_t = float(np.var(treated_y, ddof=1)) if treated_y.size > 1 else 0.0
    var_c = float(np.var(control_y, ddof=1)) if control_y.size > 1 else 0.0
    if var_t + var_c == 0.0:
        raise ValueError("zero outcome variance in both matched arms")
    return delta_tilde, delta / math.sqrt(var_t + var_c)
