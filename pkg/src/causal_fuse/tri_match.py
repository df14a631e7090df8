"""Triplet matched design: align trial copies with observational treated
units, then attach observational controls, and report covariate balance.

The tripartite objective is approximated in two sequential optimal
assignments (exact three-way matching is NP-hard):

* Pass A expands each trial unit into its planned copies, pads the
  observational treated side with zero-cost imaginary units to square the
  problem, and solves a min-cost perfect assignment.  Sets anchored on
  imaginary units are discarded.
* Pass B gives every real observational treated unit (with its trial
  copy, when one was matched) the requested number of controls by another
  min-cost assignment; controls from the other overlap domain are allowed
  but penalized, so same-domain controls are used first.

Distances are Mahalanobis on raw covariates with a small ridge on the
pooled observational covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .gen_score import CopyPlan
from .study_data import OS, RCT, StudyData, UnitRecord

__all__ = [
    "MatchedSet",
    "BalanceRow",
    "BalanceReport",
    "MatchingError",
    "pooled_os_covariance",
    "mahalanobis_matrix",
    "match_triplets",
    "smd",
]

OVERLAP = "overlap"
NON_OVERLAP = "non_overlap"
SMD_SENTINEL = 1e6  # returned when means differ but the pooled sd is zero


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class MatchedSet:
    """One observational treated unit with its controls and optional trial anchor."""

    set_id: int
    treated_id: str
    control_ids: tuple[str, ...]
    rct_id: str | None
    in_overlap: bool


@dataclass(frozen=True)
class BalanceRow:
    domain: str  # overlap / non_overlap
    phase: str  # before / after
    contrast: str  # treated_vs_rct / control_vs_rct / treated_vs_control
    covariate: str
    smd: float


@dataclass(frozen=True)
class BalanceReport:
    rows: tuple[BalanceRow, ...]

    def max_abs(self, domain: str, phase: str) -> float | None:
        values = [r.smd for r in self.rows if r.domain == domain and r.phase == phase]
        return max(values) if values else None

    def max_abs_smd(self) -> dict[tuple[str, str], float]:
        out: dict[tuple[str, str], float] = {}
        for domain in (OVERLAP, NON_OVERLAP):
            for phase in ("before", "after"):
                value = self.max_abs(domain, phase)
                if value is not None:
                    out[(domain, phase)] = value
        return out


def pooled_os_covariance(data: StudyData) -> np.ndarray:
    """Covariance of observational covariates, ridge-regularized."""
    x = np.array([rec.x for rec in data.records if rec.source == OS], dtype=float)
    if x.shape[0] < 2:
        raise MatchingError("need at least two OS units to estimate a covariance")
    cov = np.cov(x, rowvar=False)
    cov = np.atleast_2d(cov)
    p = cov.shape[0]
    ridge = 1e-6 * np.trace(cov) / p
    return cov + ridge * np.eye(p)


def mahalanobis_matrix(
    rows: list[UnitRecord | None],
    cols: list[UnitRecord | None],
    covariance: np.ndarray,
) -> np.ndarray:
    """Pairwise Mahalanobis distances; None entries (imaginary units) cost 0."""
    out = np.zeros((len(rows), len(cols)))
    real_r = [i for i, u in enumerate(rows) if u is not None]
    real_c = [j for j, u in enumerate(cols) if u is not None]
    if not real_r or not real_c:
        return out
    xr = np.array([rows[i].x for i in real_r], dtype=float)
    xc = np.array([cols[j].x for j in real_c], dtype=float)
    if not (np.isfinite(xr).all() and np.isfinite(xc).all()):
        raise MatchingError("non-finite covariates in distance computation")
    vi = np.linalg.inv(covariance)
    d = cdist(xr, xc, "mahalanobis", VI=vi)
    out[np.ix_(real_r, real_c)] = d
    return out


def _pass_a_anchors(
    data: StudyData, plan: CopyPlan, covariance: np.ndarray
) -> dict[str, str]:
    """Assign trial copies to overlap treated units; returns treated_id -> rct_id."""
    rct_units = [rec for rec in data.records if rec.source == RCT]
    treated_in = [
        rec for rec in data.records if rec.source == OS and rec.z == 1 and rec.in_overlap
    ]
    if not treated_in:
        return {}
    copy_rows: list[UnitRecord] = []
    for rec in rct_units:
        copy_rows.extend([rec] * plan.copies[rec.id])
    n_imaginary = len(copy_rows) - len(treated_in)
    if n_imaginary < 0:
        raise MatchingError(
            f"copy plan provides {len(copy_rows)} trial copies for "
            f"{len(treated_in)} overlap treated units"
        )
    cols: list[UnitRecord | None] = list(treated_in) + [None] * n_imaginary
    cost = mahalanobis_matrix(list(copy_rows), cols, covariance)
    row_ind, col_ind = linear_sum_assignment(cost)
    anchors: dict[str, str] = {}
    for r, c in zip(row_ind, col_ind):
        if c < len(treated_in):
            anchors[treated_in[c].id] = copy_rows[r].id
    return anchors


def match_triplets(
    data: StudyData, plan: CopyPlan, controls_per_set: int = 1
) -> tuple[list[MatchedSet], BalanceReport]:
    """Build the matched design and its balance diagnostics."""
    if controls_per_set < 1:
        raise MatchingError("controls_per_set must be at least 1")
    covariance = pooled_os_covariance(data)
    treated = [rec for rec in data.records if rec.source == OS and rec.z == 1]
    controls = [rec for rec in data.records if rec.source == OS and rec.z == 0]
    needed = len(treated) * controls_per_set
    if needed > len(controls):
        raise MatchingError(
            f"not enough OS controls: need {needed} "
            f"({len(treated)} sets x {controls_per_set}), have {len(controls)} "
            f"(short by {needed - len(controls)})"
        )
    anchors = _pass_a_anchors(data, plan, covariance)
    by_id = data.by_id()

    # Pass B: arc cost = d(control, treated) [+ d(control, trial copy)],
    # plus a large penalty for crossing the overlap boundary.
    d_ct = mahalanobis_matrix(list(treated), list(controls), covariance)
    cost = d_ct.copy()
    rct_ids = [anchors.get(rec.id) for rec in treated]
    anchored = [i for i, rid in enumerate(rct_ids) if rid is not None]
    if anchored:
        rct_units = [by_id[rct_ids[i]] for i in anchored]
        d_cr = mahalanobis_matrix(rct_units, list(controls), covariance)
        for k, i in enumerate(anchored):
            cost[i] += d_cr[k]
    finite_max = float(cost.max()) if cost.size else 0.0
    penalty = 10.0 * finite_max if finite_max > 0 else 1.0
    t_domain = np.array([rec.in_overlap for rec in treated])
    c_domain = np.array([rec.in_overlap for rec in controls])
    cost = cost + penalty * (t_domain[:, None] != c_domain[None, :])

    expanded = np.repeat(cost, controls_per_set, axis=0)
    row_ind, col_ind = linear_sum_assignment(expanded)
    assigned: dict[int, list[str]] = {i: [] for i in range(len(treated))}
    for r, c in zip(row_ind, col_ind):
        assigned[r // controls_per_set].append(controls[c].id)

    sets = []
    for i, rec in enumerate(treated):
        sets.append(
            MatchedSet(
                set_id=i + 1,
                treated_id=rec.id,
                control_ids=tuple(sorted(assigned[i])),
                rct_id=rct_ids[i],
                in_overlap=rec.in_overlap,
            )
        )
    report = _balance_report(data, sets)
    return sets, report


def smd(group_a: list[UnitRecord], group_b: list[UnitRecord], covariate: int) -> float:
    """Standardized mean difference |mean_a - mean_b| / sqrt((var_a + var_b) / 2)."""
    a = np.array([rec.x[covariate] for rec in group_a], dtype=float)
    b = np.array([rec.x[covariate] for rec in group_b], dtype=float)
    if a.size == 0 or b.size == 0:
        raise MatchingError("smd requires nonempty groups")
    return _smd_arrays(a, b)


def _smd_arrays(a: np.ndarray, b: np.ndarray) -> float:
    var_a = float(np.var(a, ddof=1)) if a.size > 1 else 0.0
    var_b = float(np.var(b, ddof=1)) if b.size > 1 else 0.0
    diff = abs(float(a.mean()) - float(b.mean()))
    pooled = np.sqrt((var_a + var_b) / 2.0)
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else SMD_SENTINEL
    return diff / pooled


def _balance_report(data: StudyData, sets: list[MatchedSet]) -> BalanceReport:
    by_id = data.by_id()
    names = data.covariate_names
    rows: list[BalanceRow] = []

    def add(domain, phase, contrast, xa, xb):
        if xa.shape[0] == 0 or xb.shape[0] == 0:
            return
        for j, name in enumerate(names):
            rows.append(BalanceRow(domain, phase, contrast, name, _smd_arrays(xa[:, j], xb[:, j])))

    def xmat(units) -> np.ndarray:
        return np.array([u.x for u in units], dtype=float).reshape(len(units), data.p)

    rct_all = xmat([r for r in data.records if r.source == RCT])
    for domain, flag in ((OVERLAP, True), (NON_OVERLAP, False)):
        sets_d = [s for s in sets if s.in_overlap == flag]
        before_t = xmat(
            [r for r in data.records if r.source == OS and r.z == 1 and r.in_overlap == flag]
        )
        before_c = xmat(
            [r for r in data.records if r.source == OS and r.z == 0 and r.in_overlap == flag]
        )
        after_t = xmat([by_id[s.treated_id] for s in sets_d])
        after_c = xmat([by_id[cid] for s in sets_d for cid in s.control_ids])
        after_r = xmat([by_id[s.rct_id] for s in sets_d if s.rct_id is not None])
        rct_before = rct_all if flag else np.empty((0, data.p))
        add(domain, "before", "treated_vs_rct", before_t, rct_before)
        add(domain, "before", "control_vs_rct", before_c, rct_before)
        add(domain, "before", "treated_vs_control", before_t, before_c)
        add(domain, "after", "treated_vs_rct", after_t, after_r)
        add(domain, "after", "control_vs_rct", after_c, after_r)
        add(domain, "after", "treated_vs_control", after_t, after_c)
    return BalanceReport(rows=tuple(rows))
