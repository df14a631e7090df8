"""Sensitivity analysis for the observational arm of the matched design.

For a bias level gamma >= 1, within-set treatment probabilities may differ
by at most a factor of gamma.  Each set's worst-case probabilities (the
separable approximation) put mass 1/(m + (J-m)*gamma) on the m smallest
adjusted outcomes and gamma times that on the rest, choosing m to maximize
the implied mean (variance breaks ties).  The per-set statistic subtracts
that worst-case expectation from the treated-minus-controls difference, so
the averaged statistic is stochastically dominated by a centered normal
under the bias model; tests compare its studentized value to normal
quantiles.

Directions name the tested tail: UPPER is the greater-than alternative
(its p-value grows with the hypothesized effect), LOWER is implemented by
negating outcomes and the hypothesis and reusing the UPPER machinery.
Confidence limits come from root-finding on the studentized statistic, and
the combined analysis consumes monotone-envelope p-values evaluated on a
short grid behind the query point.

For the common all-pairs design (one control per treated) the statistic
collapses to tau_tilde = (d - b) - lambda * |d - b| with d the within-pair
difference and lambda = (gamma - 1) / (gamma + 1); the curve evaluator
exploits this with sorted prefix sums, which makes whole p-value curves
cheap.  The general variable-J path is vectorized over query points and
cross-checked against the scalar operations in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc as _erfc

from .results import IntervalResult
from .stat_kernel import find_root, normal_quantile
from .study_data import StudyData
from .tri_match import MatchedSet

__all__ = [
    "UPPER",
    "LOWER",
    "SetOutcomes",
    "EtaVector",
    "OsTestResult",
    "SetData",
    "DegenerateDataError",
    "collect_sets",
    "adjust_sets",
    "separable_eta",
    "tilde_tau",
    "os_test",
    "os_p_value",
    "os_ci",
    "OsPValueCurve",
]

UPPER = "upper"
LOWER = "lower"

_MU_TIE_TOL = 1e-12


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class SetData:
    """Raw outcomes of one matched set's OS members; treated unit first."""

    y: np.ndarray
    treated_index: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "y", y)
        if y.ndim != 1 or y.size < 2:
            raise ValueError("a matched set needs at least two OS members")
        if not 0 <= self.treated_index < y.size:
            raise ValueError("treated_index out of range")


@dataclass(frozen=True)
class SetOutcomes:
    """Outcomes of one set after subtracting the hypothesized effect from the treated unit."""

    adjusted: np.ndarray
    treated_index: int

    def __post_init__(self):
        adjusted = np.asarray(self.adjusted, dtype=float)
        object.__setattr__(self, "adjusted", adjusted)
        if adjusted.size < 2:
            raise ValueError("a matched set needs at least two members")
        if not 0 <= self.treated_index < adjusted.size:
            raise ValueError("treated_index out of range")

    @property
    def size(self) -> int:
        return int(self.adjusted.size)


@dataclass(frozen=True)
class EtaVector:
    """Worst-case within-set treatment probabilities (sum to one)."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if probs.min() <= 0 or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be positive and sum to one")


@dataclass(frozen=True)
class OsTestResult:
    statistic: float
    se: float
    z_score: float
    p_value: float
    direction: str


def collect_sets(matched_sets: list[MatchedSet], data: StudyData) -> list[SetData]:
    """Extract per-set OS outcomes (treated first) from a matched design."""
    by_id = data.by_id()
    out = []
    for ms in matched_sets:
        y = [by_id[ms.treated_id].y] + [by_id[cid].y for cid in ms.control_ids]
        out.append(SetData(y=np.array(y, dtype=float), treated_index=0))
    return out


def adjust_sets(sets: list[SetData], beta0: float) -> list[SetOutcomes]:
    """Subtract beta0 from each treated outcome."""
    out = []
    for s in sets:
        adjusted = s.y.copy()
        adjusted[s.treated_index] -= beta0
        out.append(SetOutcomes(adjusted=adjusted, treated_index=s.treated_index))
    return out


def _candidate_weights(size: int, gamma: float) -> np.ndarray:
    """Rows m=1..J-1 of worst-case probabilities on sorted positions."""
    j = size
    weights = np.empty((j - 1, j))
    for m in range(1, j):
        denom = m + (j - m) * gamma
        weights[m - 1, :m] = 1.0 / denom
        weights[m - 1, m:] = gamma / denom
    return weights


def separable_eta(set_outcomes: SetOutcomes, gamma: float) -> EtaVector:
    """Worst-case probabilities for one set at bias level gamma.

    Ties in the maximized mean (within 1e-12) are broken by the larger
    implied variance, then by the smaller m, for determinism.
    """
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    y = set_outcomes.adjusted
    j = y.size
    order = np.argsort(y, kind="stable")
    y_sorted = y[order]
    weights = _candidate_weights(j, gamma)
    mu = weights @ y_sorted
    best_mu = mu.max()
    eligible = mu >= best_mu - _MU_TIE_TOL
    sigma2 = weights @ (y_sorted**2) - mu**2
    sigma2 = np.where(eligible, sigma2, -np.inf)
    best_sigma = sigma2.max()
    choice = int(np.argmax(sigma2 >= best_sigma - _MU_TIE_TOL))
    probs_sorted = weights[choice]
    probs = np.empty(j)
    probs[order] = probs_sorted
    return EtaVector(probs=probs)


def tilde_tau(set_outcomes: SetOutcomes, eta: EtaVector) -> float:
    """Treated-minus-controls difference minus its worst-case expectation."""
    y = set_outcomes.adjusted
    j = y.size
    if eta.probs.size != j:
        raise ValueError("eta length does not match set size")
    t = set_outcomes.treated_index
    tau_hat = y[t] - (y.sum() - y[t]) / (j - 1)
    correction = float(eta.probs @ y) - float((1.0 - eta.probs) @ y) / (j - 1)
    return float(tau_hat - correction)


def _summarize(tilde: np.ndarray, direction: str) -> OsTestResult:
    i = tilde.size
    if i < 2:
        raise DegenerateDataError("need at least two matched sets")
    total = float(tilde.sum())
    total_sq = float((tilde**2).sum())
    var = total_sq / (i * (i - 1)) - total**2 / (i * i * (i - 1))
    se = math.sqrt(max(var, 0.0))
    if se == 0.0:
        raise DegenerateDataError("all per-set statistics are equal; standard error is zero")
    statistic = total / i
    z = statistic / se
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return OsTestResult(statistic=statistic, se=se, z_score=z, p_value=p, direction=direction)


def os_test(sets: list[SetOutcomes], gamma: float, direction: str = UPPER) -> OsTestResult:
    """Studentized worst-case test across sets.

    UPPER tests the greater-than alternative directly; LOWER negates the
    adjusted outcomes and reuses it, so a small p always means rejection
    in the requested direction and the reported z is in the negated space.
    """
    if direction not in (UPPER, LOWER):
        raise ValueError(f"unknown direction {direction!r}")
    if direction == LOWER:
        sets = [
            SetOutcomes(adjusted=-s.adjusted, treated_index=s.treated_index) for s in sets
        ]
    tilde = np.array(
        [tilde_tau(s, separable_eta(s, gamma)) for s in sets], dtype=float
    )
    return _summarize(tilde, direction)


class OsPValueCurve:
    """Vectorized p-value curve p(beta0) for one (gamma, direction).

    Internally everything runs in the UPPER direction on sign-flipped
    outcomes, where the raw p-value is nondecreasing in beta0 up to local
    dips; ``envelope`` enforces monotonicity with a running maximum over
    a trailing grid of ``envelope_points`` spanning ``span_se`` standard
    errors.
    """

    def __init__(
        self,
        sets: list[SetData],
        gamma: float,
        direction: str = UPPER,
        envelope_points: int = 201,
        span_se: float = 6.0,
    ):
        if gamma < 1.0:
            raise ValueError(f"gamma must be >= 1, got {gamma}")
        if direction not in (UPPER, LOWER):
            raise ValueError(f"unknown direction {direction!r}")
        if len(sets) < 2:
            raise DegenerateDataError("need at least two matched sets")
        self.gamma = float(gamma)
        self.direction = direction
        self.envelope_points = int(envelope_points)
        self.span_se = float(span_se)
        self._sign = 1.0 if direction == UPPER else -1.0
        self.n_sets = len(sets)

        sizes = {s.y.size for s in sets}
        self._pairs_only = sizes == {2}
        if self._pairs_only:
            d = np.array(
                [s.y[s.treated_index] - (s.y.sum() - s.y[s.treated_index]) for s in sets]
            )
            d = self._sign * d
            self._d_sorted = np.sort(d)
            self._prefix1 = np.concatenate([[0.0], np.cumsum(self._d_sorted)])
            self._prefix2 = np.concatenate([[0.0], np.cumsum(self._d_sorted**2)])
            self._lambda = (self.gamma - 1.0) / (self.gamma + 1.0)
        else:
            groups: dict[int, list[SetData]] = {}
            for s in sets:
                groups.setdefault(s.y.size, []).append(s)
            self._groups = []
            for j, members in sorted(groups.items()):
                y = np.array([self._sign * m.y for m in members])
                tmask = np.zeros((len(members), j))
                for row, m in enumerate(members):
                    tmask[row, m.treated_index] = 1.0
                self._groups.append((j, y, tmask, _candidate_weights(j, self.gamma)))

    # raw statistics ----------------------------------------------------

    def _stats_pairs(self, beta_eff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        i = self.n_sets
        lam = self._lambda
        k = np.searchsorted(self._d_sorted, beta_eff, side="left")
        s1_lo = self._prefix1[k]
        s2_lo = self._prefix2[k]
        s1_hi = self._prefix1[i] - s1_lo
        s2_hi = self._prefix2[i] - s2_lo
        n_lo = k.astype(float)
        n_hi = i - n_lo
        total = (1.0 + lam) * (s1_lo - n_lo * beta_eff) + (1.0 - lam) * (
            s1_hi - n_hi * beta_eff
        )
        total_sq = (1.0 + lam) ** 2 * (
            s2_lo - 2.0 * beta_eff * s1_lo + n_lo * beta_eff**2
        ) + (1.0 - lam) ** 2 * (s2_hi - 2.0 * beta_eff * s1_hi + n_hi * beta_eff**2)
        return total, total_sq

    def _stats_general(self, beta_eff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = beta_eff.size
        total = np.zeros(q)
        total_sq = np.zeros(q)
        for j, y, tmask, weights in self._groups:
            adjusted = y[:, None, :] - tmask[:, None, :] * beta_eff[None, :, None]
            srt = np.sort(adjusted, axis=2)
            mu = srt @ weights.T  # (I, Q, J-1)
            best_mu = mu.max(axis=2, keepdims=True)
            eligible = mu >= best_mu - _MU_TIE_TOL
            sigma2 = (srt**2) @ weights.T - mu**2
            sigma2 = np.where(eligible, sigma2, -np.inf)
            best_sigma = sigma2.max(axis=2, keepdims=True)
            choice = np.argmax(sigma2 >= best_sigma - _MU_TIE_TOL, axis=2)
            mu_star = np.take_along_axis(mu, choice[:, :, None], axis=2)[:, :, 0]
            correction = (j / (j - 1.0)) * (mu_star - adjusted.mean(axis=2))
            treated = (adjusted * tmask[:, None, :]).sum(axis=2)
            tau_hat = treated - (adjusted.sum(axis=2) - treated) / (j - 1.0)
            tilde = tau_hat - correction
            total += tilde.sum(axis=0)
            total_sq += (tilde**2).sum(axis=0)
        return total, total_sq

    def _zse(self, beta_eff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        i = self.n_sets
        if self._pairs_only:
            total, total_sq = self._stats_pairs(beta_eff)
        else:
            total, total_sq = self._stats_general(beta_eff)
        var = total_sq / (i * (i - 1)) - total**2 / (i * i * (i - 1))
        se = np.sqrt(np.maximum(var, 0.0))
        if np.any(se == 0.0):
            raise DegenerateDataError("zero standard error on the evaluation grid")
        return (total / i) / se, se

    def raw(self, beta0: np.ndarray) -> np.ndarray:
        """Raw (un-monotonized) p-values at the query points."""
        beta_eff = self._sign * np.atleast_1d(np.asarray(beta0, dtype=float))
        z, _ = self._zse(beta_eff)
        return 0.5 * _erfc(z / math.sqrt(2.0))

    def z_score(self, beta0: float) -> float:
        beta_eff = self._sign * np.atleast_1d(float(beta0))
        z, _ = self._zse(beta_eff)
        return float(z[0])

    def envelope(self, beta0: np.ndarray, chunk: int = 128) -> np.ndarray:
        """Monotone p-values: running maximum over a trailing window.

        The window at each query point spans span_se standard errors on
        the side where the raw curve is smaller, so a monotone raw curve
        passes through unchanged while local dips are flattened.
        """
        beta_eff = self._sign * np.atleast_1d(np.asarray(beta0, dtype=float))
        npts = self.envelope_points
        offsets = np.linspace(self.span_se, 0.0, npts)
        out = np.empty(beta_eff.size)
        for start in range(0, beta_eff.size, chunk):
            block = beta_eff[start : start + chunk]
            _, se = self._zse(block)
            grid = block[:, None] - se[:, None] * offsets[None, :]
            z, _ = self._zse(grid.ravel())
            p = 0.5 * _erfc(z / math.sqrt(2.0))
            out[start : start + chunk] = p.reshape(block.size, npts).max(axis=1)
        return out


def os_p_value(
    sets: list[SetData],
    beta0: float,
    gamma: float,
    direction: str = UPPER,
    envelope_points: int = 201,
    span_se: float = 6.0,
) -> float:
    """Monotone-envelope sensitivity p-value at one hypothesized effect."""
    curve = OsPValueCurve(
        sets, gamma, direction, envelope_points=envelope_points, span_se=span_se
    )
    return float(curve.envelope(np.array([beta0]))[0])


def _upper_root(sets: list[SetData], gamma: float, z_target: float, tol: float) -> float:
    """beta0 where the UPPER-direction z-score equals z_target."""
    curve = OsPValueCurve(sets, gamma, UPPER)
    d0 = np.array([s.y[s.treated_index] - (s.y.sum() - s.y[s.treated_index]) / (s.y.size - 1) for s in sets])
    center = float(d0.mean())
    _, se = curve._zse(np.array([center]))
    scale = float(se[0]) * math.sqrt(curve.n_sets) if se[0] > 0 else 1.0
    return find_root(
        lambda b: curve.z_score(b) - z_target,
        center - 4.0 * scale,
        center + 4.0 * scale,
        tol=tol,
    )


def os_ci(
    sets: list[SetData], gamma: float, alpha: float = 0.025, tol: float | None = None
) -> IntervalResult:
    """Test-inversion interval [beta_L, beta_U] at level (1 - 2*alpha).

    beta_L solves the UPPER-direction z-score equal to z_{1-alpha}; beta_U
    is the mirror image obtained on negated outcomes.
    """
    if not (0.0 < alpha < 0.5):
        raise ValueError(f"alpha must be in (0, 0.5), got {alpha}")
    z_target = normal_quantile(1.0 - alpha)
    spread = np.std([s.y[s.treated_index] for s in sets]) + 1e-12
    if tol is None:
        tol = 1e-6 * max(1.0, float(spread))
    lower = _upper_root(sets, gamma, z_target, tol)
    negated = [SetData(y=-s.y, treated_index=s.treated_index) for s in sets]
    upper = -_upper_root(negated, gamma, z_target, tol)
    return IntervalResult(
        lower=lower,
        upper=upper,
        method="os",
        alpha=alpha,
        diagnostics={"gamma": gamma, "z_target": z_target},
    )
