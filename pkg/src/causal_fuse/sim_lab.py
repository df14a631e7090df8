"""Simulation laboratory: data generation with controllable internal and
external bias, full-pipeline replication, and coverage/length/power/balance
aggregation.

The generating process draws five standard-normal covariates, a latent
confounder U, and noise.  The control potential outcome is
``10 + 4*x1 - 2*x2 + 3*x5 + U + eps``.  Treated outcomes add a bump of
``delta_star / frac_outside`` inside the overlap region (making the
overlap-region effect overstate the target estimand by exactly
``delta_star``) plus an optional constant effect for power studies.
Selection into the trial happens only inside the overlap region with
probability ``expit(-1.5 + 0.1*x1 + 0.1*x2 - 0.3*x4)``; trial treatment is
a fair coin; observational treatment follows
``expit(-2 - 0.3*x1 + 0.1*x3 - 0.2*x5 + log(gamma_star)*U)``, so
``gamma_star`` is the strength of unmeasured confounding.

Replications are deterministic: replication r runs on RNG stream
(base_seed, r), so reports are bit-identical for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .combine import combined_limit, default_combined_grid
from .gen_score import fit_generalization, plan_copies
from .os_sens import LOWER, UPPER, collect_sets, os_ci
from .rct_infer import BERNOULLI, build_rct_design, draw_assignments, rct_ci
from .results import IntervalResult
from .stat_kernel import SeededRng, expit
from .study_data import OS, RCT, OverlapRule, StudyData, UnitRecord, apply_overlap, residualize
from .tri_match import NON_OVERLAP, OVERLAP, match_triplets

__all__ = [
    "ALL",
    "MAJORITY",
    "LIMITED",
    "ScenarioSpec",
    "MethodSummary",
    "ScenarioReport",
    "ScenarioError",
    "overlap_rule",
    "generate",
    "true_effect",
    "run_scenario",
]

ALL = "all"
MAJORITY = "majority"
LIMITED = "limited"

_X1_THRESHOLD = {ALL: -math.inf, MAJORITY: -1.0, LIMITED: 0.0}

METHODS = ("rct", "os", "combined")


class ScenarioError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation scenario and its replication plan.

    ``analysis`` lists (gamma, delta) pairs used at the inference stage;
    when omitted, the truth (gamma_star, delta_star) is used, matching
    the correctly-specified analyses.
    """

    n_total: int
    overlap: str = ALL
    delta_star: float = 0.0
    gamma_star: float = 1.0
    effect_tau: float | None = None
    replications: int = 100
    alpha: float = 0.05
    mc_samples: int = 10_000
    base_seed: int = 0
    analysis: tuple[tuple[float, float], ...] | None = None
    controls_per_set: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.overlap not in (ALL, MAJORITY, LIMITED):
            raise ValueError(f"unknown overlap regime {self.overlap!r}")
        if self.delta_star < 0 or self.gamma_star < 1:
            raise ValueError("need delta_star >= 0 and gamma_star >= 1")
        if self.overlap == ALL and self.delta_star > 0:
            raise ValueError(
                "delta_star > 0 is undefined under complete overlap "
                "(no units outside the overlap region)"
            )
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0,1)")
        for g, d in self.analysis_pairs():
            if g < 1 or d < 0:
                raise ValueError(f"invalid analysis pair (gamma={g}, delta={d})")

    def analysis_pairs(self) -> tuple[tuple[float, float], ...]:
        if self.analysis:
            return self.analysis
        return ((self.gamma_star, self.delta_star),)


@dataclass(frozen=True)
class MethodSummary:
    coverage: float
    avg_length: float
    rejection_rate: float


@dataclass(frozen=True)
class ScenarioReport:
    spec: ScenarioSpec
    methods: dict[tuple[str, float, float], MethodSummary]
    balance_mean: dict[tuple[str, str], float]
    balance_improved_fraction: dict[str, float]
    n_ok: int
    n_errors: int
    error_messages: tuple[str, ...] = field(default_factory=tuple)


def overlap_rule(spec: ScenarioSpec) -> OverlapRule:
    threshold = _X1_THRESHOLD[spec.overlap]
    if math.isinf(threshold):
        return OverlapRule(bounds=())
    return OverlapRule(bounds=((0, threshold, math.inf),))


def generate(spec: ScenarioSpec, rng: SeededRng | np.random.Generator) -> StudyData:
    """Draw one study population of size n_total."""
    gen = rng.generator() if isinstance(rng, SeededRng) else rng
    n = spec.n_total
    x = gen.standard_normal((n, 5))
    u = gen.standard_normal(n)
    eps = gen.standard_normal(n)
    u_select = gen.random(n)
    u_treat = gen.random(n)

    inside = x[:, 0] >= _X1_THRESHOLD[spec.overlap]
    select_p = expit(-1.5 + 0.1 * x[:, 0] + 0.1 * x[:, 1] - 0.3 * x[:, 3])
    is_rct = inside & (u_select < select_p)
    os_treat_p = expit(
        -2.0 - 0.3 * x[:, 0] + 0.1 * x[:, 2] - 0.2 * x[:, 4] + math.log(spec.gamma_star) * u
    )
    z = np.where(is_rct, u_treat < 0.5, u_treat < os_treat_p)

    if spec.delta_star > 0:
        os_treated = ~is_rct & z
        n_out = int((os_treated & ~inside).sum())
        n_all = int(os_treated.sum())
        if n_out == 0:
            raise ScenarioError(
                "no OS treated units fell outside the overlap region; "
                "the generalizability bump delta_star / fraction is undefined"
            )
        delta_tilde = spec.delta_star * n_all / n_out
    else:
        delta_tilde = 0.0
    tau = spec.effect_tau or 0.0
    y0 = 10.0 + 4.0 * x[:, 0] - 2.0 * x[:, 1] + 3.0 * x[:, 4] + u + eps
    y1 = y0 + delta_tilde * inside + tau
    y = np.where(z, y1, y0)

    records = []
    for i in range(n):
        records.append(
            UnitRecord(
                id=f"u{i + 1}",
                source=RCT if is_rct[i] else OS,
                z=int(z[i]),
                y=float(y[i]),
                x=tuple(float(v) for v in x[i]),
                in_overlap=bool(inside[i]) or bool(is_rct[i]),
            )
        )
    return StudyData(records=tuple(records))


def true_effect(spec: ScenarioSpec, data: StudyData) -> float:
    """Finite-sample target: mean of y(1) - y(0) over the OS treated units.

    The individual effect is delta_tilde inside the overlap region (zero
    outside) plus tau, and delta_tilde uses the realized outside fraction,
    so the mean reduces to delta_star * n_inside / n_outside + tau.
    """
    tau = spec.effect_tau or 0.0
    if spec.delta_star == 0:
        return tau
    _, _, n_plus, n_minus = data.counts
    if n_minus == 0:
        raise ScenarioError("no OS treated units outside the overlap region")
    return spec.delta_star * n_plus / n_minus + tau


def _replicate(spec: ScenarioSpec, rep: int) -> dict:
    rng = SeededRng(spec.base_seed, rep)
    gen = rng.generator()
    try:
        data = generate(spec, gen)
        data = apply_overlap(data, overlap_rule(spec))
        truth = true_effect(spec, data)
        model = fit_generalization(data)
        plan = plan_copies(model, data)
        sets, balance = match_triplets(data, plan, spec.controls_per_set)
        data = residualize(data)
        os_sets = collect_sets(sets, data)
        design = build_rct_design(data, sets, scheme=BERNOULLI, theta=0.5)
        assignments = draw_assignments(design, gen, spec.mc_samples)

        pairs = spec.analysis_pairs()
        gammas = sorted({g for g, _ in pairs})
        deltas = sorted({d for _, d in pairs})
        alpha = spec.alpha

        os_by_gamma = {g: os_ci(os_sets, g, alpha=alpha / 2.0) for g in gammas}
        base = rct_ci(design, 0.0, alpha=alpha, assignments=assignments)
        rct_by_delta = {
            d: IntervalResult(base.lower - d, base.upper + d, "rct", alpha) for d in deltas
        }
        grid = default_combined_grid(os_sets, design, assignments, max(deltas))
        intervals: dict[tuple[str, float, float], tuple[float, float]] = {}
        for g, d in pairs:
            intervals[("os", g, d)] = (os_by_gamma[g].lower, os_by_gamma[g].upper)
            intervals[("rct", g, d)] = (rct_by_delta[d].lower, rct_by_delta[d].upper)
            lo = combined_limit(
                os_sets, design, g, d, alpha / 2.0, LOWER, assignments=assignments, grid=grid
            )
            hi = combined_limit(
                os_sets, design, g, d, alpha / 2.0, UPPER, assignments=assignments, grid=grid
            )
            intervals[("combined", g, d)] = (lo, hi)

        balance_values = {
            key: balance.max_abs(*key)
            for key in (
                (OVERLAP, "before"),
                (OVERLAP, "after"),
                (NON_OVERLAP, "before"),
                (NON_OVERLAP, "after"),
            )
        }
        return {"ok": True, "truth": truth, "intervals": intervals, "balance": balance_values}
    except Exception as exc:  # per-replication failures are budgeted, not fatal
        return {"ok": False, "error": f"replication {rep}: {exc}"}


def _replicate_star(args: tuple[ScenarioSpec, int]) -> dict:
    return _replicate(*args)


def run_scenario(spec: ScenarioSpec) -> ScenarioReport:
    """Run all replications and aggregate coverage, length, power, balance.

    Fails if more than 2% of replications error out.  Results are reduced
    in replication order, so the report does not depend on worker count.
    """
    reps = range(spec.replications)
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            chunk = max(1, spec.replications // (spec.workers * 8))
            results = list(
                pool.map(_replicate_star, [(spec, r) for r in reps], chunksize=chunk)
            )
    else:
        results = [_replicate(spec, r) for r in reps]

    ok = [r for r in results if r["ok"]]
    errors = [r["error"] for r in results if not r["ok"]]
    if len(errors) > 0.02 * spec.replications:
        raise ScenarioError(
            f"{len(errors)} of {spec.replications} replications failed; first: {errors[0]}"
        )
    if not ok:
        raise ScenarioError("no replication succeeded")

    methods: dict[tuple[str, float, float], MethodSummary] = {}
    for key in ok[0]["intervals"]:
        covered, lengths, rejected = [], [], []
        for r in ok:
            lo, hi = r["intervals"][key]
            covered.append(lo <= r["truth"] <= hi)
            lengths.append(hi - lo)
            rejected.append(not (lo <= 0.0 <= hi))
        methods[key] = MethodSummary(
            coverage=float(np.mean(covered)),
            avg_length=float(np.mean(lengths)),
            rejection_rate=float(np.mean(rejected)),
        )

    balance_mean: dict[tuple[str, str], float] = {}
    balance_improved: dict[str, float] = {}
    for domain in (OVERLAP, NON_OVERLAP):
        befores = [r["balance"][(domain, "before")] for r in ok]
        afters = [r["balance"][(domain, "after")] for r in ok]
        pairs = [(b, a) for b, a in zip(befores, afters) if b is not None and a is not None]
        if not pairs:
            continue
        balance_mean[(domain, "before")] = float(np.mean([b for b, _ in pairs]))
        balance_mean[(domain, "after")] = float(np.mean([a for _, a in pairs]))
        balance_improved[domain] = float(np.mean([a < b for b, a in pairs]))

    return ScenarioReport(
        spec=spec,
        methods=methods,
        balance_mean=balance_mean,
        balance_improved_fraction=balance_improved,
        n_ok=len(ok),
        n_errors=len(errors),
        error_messages=tuple(errors[:5]),
    )
