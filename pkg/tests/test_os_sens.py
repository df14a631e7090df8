import itertools

import numpy as np
import pytest

from causal_fuse.os_sens import (
    LOWER,
    UPPER,
    DegenerateDataError,
    OsPValueCurve,
    SetData,
    SetOutcomes,
    adjust_sets,
    os_ci,
    os_p_value,
    os_test,
    separable_eta,
    tilde_tau,
)
from causal_fuse.stat_kernel import normal_cdf


def outcomes(values, treated=0):
    return SetOutcomes(adjusted=np.array(values, dtype=float), treated_index=treated)


def polytope_extreme_mu(adjusted, gamma):
    """Brute-force maximum of sum(eta * y) over the bias polytope's extreme
    points: every probability vector whose entries take two values with
    ratio exactly gamma (or the uniform vector)."""
    j = len(adjusted)
    best = -np.inf
    for pattern in itertools.product([1.0, gamma], repeat=j):
        weights = np.array(pattern) / sum(pattern)
        best = max(best, float(weights @ adjusted))
    return best


class TestSeparableEta:
    def test_gamma_one_is_uniform(self):
        for j in (2, 3, 5):
            eta = separable_eta(outcomes(list(range(j))), 1.0)
            assert eta.probs == pytest.approx([1.0 / j] * j)

    def test_pair_worked_example(self):
        eta = separable_eta(outcomes([0.0, 1.0]), 2.0)
        assert eta.probs == pytest.approx([1.0 / 3.0, 2.0 / 3.0])

    def test_triple_hand_enumeration(self):
        # m=1: eta=(1/4,3/8,3/8), mu=9/8; m=2: eta=(2/7,2/7,3/7), mu=8/7 > 9/8
        eta = separable_eta(outcomes([0.0, 1.0, 2.0]), 1.5)
        assert eta.probs == pytest.approx([2.0 / 7.0, 2.0 / 7.0, 3.0 / 7.0])

    def test_maps_back_to_original_order(self):
        eta = separable_eta(outcomes([5.0, -1.0, 2.0]), 2.0)
        # sorted order is (-1, 2, 5): largest outcome gets the largest weight
        assert eta.probs[0] == eta.probs.max()
        assert eta.probs[1] == eta.probs.min()

    def test_ratio_constraint_exact(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            j = int(rng.integers(2, 6))
            gamma = float(rng.choice([1.5, 2.0, 3.0]))
            eta = separable_eta(outcomes(rng.normal(size=j)), gamma)
            assert eta.probs.max() / eta.probs.min() == pytest.approx(gamma, abs=1e-12)
            assert eta.probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_polytope_brute_force(self):
        rng = np.random.default_rng(22)
        for _ in range(200):
            j = int(rng.integers(2, 5))
            gamma = float(rng.choice([1.0, 1.5, 2.0]))
            y = rng.normal(size=j)
            eta = separable_eta(outcomes(y), gamma)
            mu = float(eta.probs @ y)
            assert mu == pytest.approx(polytope_extreme_mu(y, gamma), abs=1e-12)

    def test_gamma_below_one_rejected(self):
        with pytest.raises(ValueError):
            separable_eta(outcomes([0.0, 1.0]), 0.9)


class TestTildeTau:
    def test_gamma_one_reduces_to_difference(self):
        s = outcomes([3.0, 1.0], treated=0)
        eta = separable_eta(s, 1.0)
        assert tilde_tau(s, eta) == pytest.approx(2.0)

    def test_pair_hand_arithmetic(self):
        # adjusted (treated 1, control 0), gamma 2: correction = 2/3 - 1/3 = 1/3
        s = outcomes([1.0, 0.0], treated=0)
        eta = separable_eta(s, 2.0)
        assert tilde_tau(s, eta) == pytest.approx(2.0 / 3.0)

    def test_equal_outcomes_give_zero(self):
        for gamma in (1.0, 1.7, 3.0):
            s = outcomes([2.0, 2.0, 2.0], treated=1)
            assert tilde_tau(s, separable_eta(s, gamma)) == pytest.approx(0.0, abs=1e-12)

    def test_correction_never_negative(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            j = int(rng.integers(2, 5))
            s = outcomes(rng.normal(size=j), treated=int(rng.integers(j)))
            tau_hat = tilde_tau(s, separable_eta(s, 1.0))
            tau_tilde = tilde_tau(s, separable_eta(s, 2.0))
            assert tau_tilde <= tau_hat + 1e-12


class TestOsTest:
    def test_two_set_hand_example(self):
        # per-set statistics (1, 3): mean 2, se = sqrt(10/2 - 16/4) = 1
        sets = [outcomes([1.0, 0.0]), outcomes([3.0, 0.0])]
        result = os_test(sets, 1.0, UPPER)
        assert result.statistic == pytest.approx(2.0)
        assert result.se == pytest.approx(1.0)
        assert result.z_score == pytest.approx(2.0)
        assert result.p_value == pytest.approx(1.0 - normal_cdf(2.0), abs=1e-12)

    def test_gamma_one_equals_paired_difference_minus_null(self):
        rng = np.random.default_rng(24)
        y_t = rng.normal(size=40) + 1.5
        y_c = rng.normal(size=40)
        beta0 = 1.5
        sets = adjust_sets(
            [SetData(y=np.array([t, c])) for t, c in zip(y_t, y_c)], beta0
        )
        result = os_test(sets, 1.0, UPPER)
        assert result.statistic == pytest.approx(float(np.mean(y_t - y_c)) - beta0, abs=1e-12)

    def test_lower_equals_upper_on_negated(self):
        rng = np.random.default_rng(25)
        sets = [outcomes(rng.normal(size=3), treated=1) for _ in range(15)]
        negated = [SetOutcomes(adjusted=-s.adjusted, treated_index=s.treated_index) for s in sets]
        lower = os_test(sets, 1.4, LOWER)
        upper = os_test(negated, 1.4, UPPER)
        assert lower.p_value == pytest.approx(upper.p_value, abs=1e-15)

    def test_degenerate_constant_data(self):
        sets = [outcomes([1.0, 0.0]), outcomes([1.0, 0.0])]
        with pytest.raises(DegenerateDataError):
            os_test(sets, 1.0, UPPER)


def random_sets(rng, n_sets=30, effect=0.0):
    sets = []
    for _ in range(n_sets):
        y_c = rng.normal(size=1)
        y_t = rng.normal() + effect
        sets.append(SetData(y=np.array([y_t, *y_c])))
    return sets


class TestCurveAndPValue:
    def test_vectorized_curve_matches_scalar_test(self):
        rng = np.random.default_rng(26)
        for j, gamma in ((2, 1.0), (2, 1.6), (3, 1.3), (4, 2.0)):
            sets = [
                SetData(y=rng.normal(size=j), treated_index=int(rng.integers(j)))
                for _ in range(12)
            ]
            curve = OsPValueCurve(sets, gamma, UPPER)
            for beta in (-1.0, 0.0, 0.7):
                scalar = os_test(adjust_sets(sets, beta), gamma, UPPER)
                assert curve.raw(np.array([beta]))[0] == pytest.approx(
                    scalar.p_value, abs=1e-12
                )
                assert curve.z_score(beta) == pytest.approx(scalar.z_score, abs=1e-10)

    def test_envelope_equals_raw_when_monotone(self):
        rng = np.random.default_rng(27)
        sets = random_sets(rng, 50)
        curve = OsPValueCurve(sets, 1.0, UPPER)
        beta = np.linspace(-1.0, 1.0, 21)
        raw = curve.raw(beta)
        env = curve.envelope(beta)
        assert np.all(env >= raw - 1e-15)
        assert env == pytest.approx(raw, abs=1e-9)  # paired gamma=1 curve is monotone

    def test_envelope_is_nondecreasing_in_beta(self):
        rng = np.random.default_rng(28)
        for trial in range(50):
            j = int(rng.integers(2, 4))
            sets = [
                SetData(y=rng.normal(size=j) * rng.uniform(0.5, 2.0))
                for _ in range(int(rng.integers(8, 25)))
            ]
            gamma = float(rng.choice([1.0, 1.3, 1.8]))
            curve = OsPValueCurve(sets, gamma, UPPER)
            spread = float(np.std([s.y[0] for s in sets])) + 1.0
            beta = np.linspace(-3 * spread, 3 * spread, 40)
            env = curve.envelope(beta)
            assert np.all(np.diff(env) >= -1e-12)

    def test_p_tends_to_one_at_large_beta(self):
        rng = np.random.default_rng(29)
        sets = random_sets(rng, 40)
        assert os_p_value(sets, 50.0, 1.0, UPPER) > 0.999
        assert os_p_value(sets, -50.0, 1.0, LOWER) > 0.999

    def test_lower_direction_mirrors_upper(self):
        rng = np.random.default_rng(30)
        sets = random_sets(rng, 25)
        negated = [SetData(y=-s.y, treated_index=s.treated_index) for s in sets]
        p_low = os_p_value(sets, 0.4, 1.2, LOWER)
        p_up = os_p_value(negated, -0.4, 1.2, UPPER)
        assert p_low == pytest.approx(p_up, abs=1e-12)


class TestOsCi:
    def test_covers_truth_and_shrinks_with_more_sets(self):
        rng = np.random.default_rng(31)
        effect = 0.8
        widths = {}
        for n in (250, 1000):
            sets = random_sets(rng, n, effect=effect)
            interval = os_ci(sets, 1.0, alpha=0.025)
            assert interval.lower < effect < interval.upper
            widths[n] = interval.length
        ratio = widths[250] / widths[1000]
        assert ratio == pytest.approx(2.0, rel=0.2)

    def test_gamma_nesting(self):
        rng = np.random.default_rng(32)
        sets = random_sets(rng, 60, effect=0.5)
        inner = os_ci(sets, 1.0, alpha=0.025)
        outer = os_ci(sets, 1.7, alpha=0.025)
        assert outer.lower <= inner.lower and outer.upper >= inner.upper

    def test_limits_sit_on_the_z_target(self):
        rng = np.random.default_rng(33)
        sets = random_sets(rng, 45, effect=-0.2)
        interval = os_ci(sets, 1.3, alpha=0.05)
        z_lower = os_test(adjust_sets(sets, interval.lower), 1.3, UPPER).z_score
        z_upper = os_test(adjust_sets(sets, interval.upper), 1.3, LOWER).z_score
        target = interval.diagnostics["z_target"]
        assert z_lower == pytest.approx(target, abs=1e-3)
        assert z_upper == pytest.approx(target, abs=1e-3)

    def test_alpha_domain(self):
        rng = np.random.default_rng(34)
        sets = random_sets(rng, 10)
        with pytest.raises(ValueError):
            os_ci(sets, 1.0, alpha=0.6)
