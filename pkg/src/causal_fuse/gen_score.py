"""Generalization scores and trial-unit copy counts.

The generalization score nu(x) = pi(x) * (1 - e(x)) / e(x) estimates how
many observational treated units in the overlap region are available per
trial unit at covariates x, where e(x) is the probability of selection
into the trial and pi(x) is the observational propensity inside the
overlap region.  Copy counts turn those scores into integer multiplicities
used by the matching stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stat_kernel import RegressionFit, fit_logistic, predict_logistic
from .study_data import OS, RCT, StudyData

__all__ = ["GeneralizationModel", "CopyPlan", "fit_generalization", "plan_copies"]


@dataclass(frozen=True)
class GeneralizationModel:
    """Fitted selection and propensity models with a probability floor.

    Predicted probabilities are clamped to [clamp, 1 - clamp] before the
    score is formed, which keeps nu finite near the overlap boundary.
    """

    selection_fit: RegressionFit
    propensity_fit: RegressionFit
    clamp: float = 0.01

    def selection_prob(self, x: np.ndarray) -> np.ndarray:
        return np.clip(predict_logistic(self.selection_fit, x), self.clamp, 1.0 - self.clamp)

    def propensity(self, x: np.ndarray) -> np.ndarray:
        return np.clip(predict_logistic(self.propensity_fit, x), self.clamp, 1.0 - self.clamp)

    def nu(self, x: np.ndarray) -> np.ndarray:
        e = self.selection_prob(x)
        pi = self.propensity(x)
        return pi * (1.0 - e) / e


@dataclass(frozen=True)
class CopyPlan:
    """Integer copy count per trial unit plus imaginary-unit bookkeeping."""

    copies: dict[str, int]
    imaginary_treated: int
    imaginary_rct: int

    def total_copies(self) -> int:
        return sum(self.copies.values())


def fit_generalization(data: StudyData, clamp: float = 0.01) -> GeneralizationModel:
    """Fit e(x) on all in-overlap units and pi(x) on in-overlap OS units."""
    overlap = [rec for rec in data.records if rec.in_overlap]
    x_all = np.array([rec.x for rec in overlap], dtype=float)
    is_rct = np.array([1.0 if rec.source == RCT else 0.0 for rec in overlap])
    if is_rct.min() == is_rct.max():
        raise ValueError(
            "selection model needs both RCT and OS units inside the overlap region"
        )
    try:
        selection_fit = fit_logistic(x_all, is_rct)
    except ValueError as exc:
        raise ValueError(f"selection model (RCT membership) failed: {exc}") from exc

    os_overlap = [rec for rec in overlap if rec.source == OS]
    x_os = np.array([rec.x for rec in os_overlap], dtype=float)
    z_os = np.array([float(rec.z) for rec in os_overlap])
    if z_os.size == 0 or z_os.min() == z_os.max():
        raise ValueError(
            "propensity model needs treated and control OS units inside the overlap region"
        )
    try:
        propensity_fit = fit_logistic(x_os, z_os)
    except ValueError as exc:
        raise ValueError(f"propensity model (OS treatment) failed: {exc}") from exc
    return GeneralizationModel(selection_fit=selection_fit, propensity_fit=propensity_fit, clamp=clamp)


def plan_copies(model: GeneralizationModel, data: StudyData) -> CopyPlan:
    """Copy counts C_m = ceil(n_o1_plus * nu_m / sum(nu)), floored at 1.

    Raw ratios are snapped to 9 decimals before the ceiling so that
    rescaling all scores by a positive constant cannot flip a count
    through floating-point noise.
    """
    rct = [rec for rec in data.records if rec.source == RCT]
    if not rct:
        raise ValueError("cannot plan copies: the study has no RCT units")
    _, _, n_o1_plus, n_o1_minus = data.counts
    x = np.array([rec.x for rec in rct], dtype=float)
    nu = model.nu(x)
    total = float(nu.sum())
    raw = n_o1_plus * nu / total
    snapped = np.round(raw, 9)
    copies = {rec.id: max(1, int(math.ceil(s))) for rec, s in zip(rct, snapped)}
    total_copies = sum(copies.values())
    return CopyPlan(
        copies=copies,
        imaginary_treated=total_copies - n_o1_plus,
        imaginary_rct=n_o1_minus,
    )
