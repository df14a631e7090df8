import math

import numpy as np
import pytest

from causal_fuse.combine import (
    CombinedError,
    combined_ci,
    combined_limit,
    default_combined_grid,
    kappa_alpha,
)
from causal_fuse.os_sens import LOWER, UPPER, OsPValueCurve, SetData
from causal_fuse.rct_infer import RctDesign, RctUnit, draw_assignments
from causal_fuse.stat_kernel import SeededRng


def solve_kappa(alpha):
    """Independent bisection oracle on kappa * (1 - ln kappa) = alpha."""
    lo, hi = 1e-12, 1.0 - 1e-12
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * (1.0 - math.log(mid)) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestKappa:
    @pytest.mark.parametrize("alpha", [0.01, 0.05, 0.1, 0.2])
    def test_identity(self, alpha):
        kappa = kappa_alpha(alpha)
        assert kappa * (1.0 - math.log(kappa)) == pytest.approx(alpha, abs=1e-9)
        assert kappa == pytest.approx(solve_kappa(alpha), abs=1e-9)

    def test_alpha_near_one_gives_kappa_near_one(self):
        assert kappa_alpha(1.0 - 1e-9) > 0.999

    def test_monte_carlo_product_of_uniforms(self):
        rng = np.random.default_rng(404)
        u = rng.random((200_000, 2))
        kappa = kappa_alpha(0.05)
        rate = float((u[:, 0] * u[:, 1] <= kappa).mean())
        assert rate == pytest.approx(0.05, abs=0.004)

    def test_domain(self):
        with pytest.raises(ValueError):
            kappa_alpha(0.0)

    def test_acceptance_arithmetic(self):
        kappa = kappa_alpha(0.05)
        assert 0.2 * 0.1 > kappa  # accepted
        assert 1.0 * 1.0 > kappa  # accepted at any alpha < 1
        assert 0.05 * 0.05 < kappa  # rejected where each test sits at its boundary


def paired_sets(rng, n, effect=0.0):
    return [
        SetData(y=np.array([rng.normal() + effect, rng.normal()])) for _ in range(n)
    ]


def simple_design(rng, n, effect=0.0):
    z = np.array([1, 0] * (n // 2))
    y = rng.normal(size=n) + z * effect
    units = tuple(
        RctUnit(id=f"m{i}", z=int(z[i]), y=float(y[i]), theta=0.5, copies=1)
        for i in range(n)
    )
    return RctDesign(units=units, scheme="bernoulli")


class TestCombinedLimit:
    def test_unit_rct_factor_reduces_to_os_inversion_at_kappa(self):
        rng = np.random.default_rng(41)
        sets = paired_sets(rng, 60, effect=0.5)
        alpha = 0.05
        kappa = kappa_alpha(alpha)
        upper = combined_limit(sets, None, gamma=1.0, delta=0.0, alpha=alpha, direction=UPPER)
        curve = OsPValueCurve(sets, 1.0, LOWER)
        tol = 2e-4 * float(np.std(np.concatenate([s.y for s in sets])))
        assert curve.envelope(np.array([upper - tol]))[0] >= kappa
        assert curve.envelope(np.array([upper + 2 * tol]))[0] < kappa

    def test_limits_bracket_the_effect(self):
        rng = np.random.default_rng(42)
        sets = paired_sets(rng, 80, effect=1.0)
        design = simple_design(rng, 60, effect=1.0)
        asg = draw_assignments(design, SeededRng(42, 1), 2000)
        lo = combined_limit(sets, design, 1.0, 0.0, 0.025, LOWER, assignments=asg)
        hi = combined_limit(sets, design, 1.0, 0.0, 0.025, UPPER, assignments=asg)
        assert lo < 1.0 < hi

    def test_grid_miss_raises(self):
        rng = np.random.default_rng(43)
        sets = paired_sets(rng, 40)
        grid = np.linspace(40.0, 50.0, 21)  # far from the acceptance region
        with pytest.raises(CombinedError):
            combined_limit(sets, None, 1.0, 0.0, 0.05, UPPER, grid=grid)


class TestCombinedCi:
    def test_nesting_across_ladder(self):
        rng = np.random.default_rng(44)
        sets = paired_sets(rng, 60, effect=0.4)
        design = simple_design(rng, 50, effect=0.4)
        asg = draw_assignments(design, SeededRng(44, 1), 1500)
        results = {}
        for gamma in (1.0, 1.3, 1.6):
            for delta in (0.0, 0.2, 0.4):
                results[(gamma, delta)] = combined_ci(
                    sets, design, gamma, delta, alpha=0.05, assignments=asg
                )
        for (g1, d1), inner in results.items():
            for (g2, d2), outer in results.items():
                if g2 >= g1 and d2 >= d1:
                    assert outer.lower <= inner.lower + 1e-9
                    assert outer.upper >= inner.upper - 1e-9

    def test_component_intervals_attached(self):
        rng = np.random.default_rng(45)
        sets = paired_sets(rng, 50, effect=0.2)
        design = simple_design(rng, 40, effect=0.2)
        result = combined_ci(
            sets, design, 1.0, 0.0, alpha=0.05, mc_samples=1500, rng=SeededRng(45, 2)
        )
        assert result.os_interval.method == "os"
        assert result.rct_interval.method == "rct"
        assert result.kappa == pytest.approx(kappa_alpha(0.025), abs=1e-12)
        assert result.lower < result.upper

    def test_combined_shorter_than_widest_component(self):
        rng = np.random.default_rng(46)
        sets = paired_sets(rng, 70, effect=0.0)
        design = simple_design(rng, 30, effect=0.0)  # small trial: wide interval
        result = combined_ci(
            sets, design, 1.0, 0.0, alpha=0.05, mc_samples=3000, rng=SeededRng(46, 1)
        )
        rct_len = result.rct_interval.length
        combined_len = result.upper - result.lower
        assert combined_len < rct_len

    def test_acceptance_region_is_interval_on_shared_grid(self):
        rng = np.random.default_rng(47)
        sets = paired_sets(rng, 40, effect=0.3)
        design = simple_design(rng, 30, effect=0.3)
        asg = draw_assignments(design, SeededRng(47, 3), 1000)
        grid = default_combined_grid(sets, design, asg, 0.0)
        from causal_fuse.rct_infer import RctPValueCurve

        for tail in (UPPER, LOWER):
            p = OsPValueCurve(sets, 1.2, tail).envelope(grid) * RctPValueCurve(
                design, asg, tail
            ).envelope(grid)
            accepted = np.flatnonzero(p >= kappa_alpha(0.025))
            assert accepted.size > 0
            assert np.array_equal(accepted, np.arange(accepted[0], accepted[-1] + 1))
