"""Probability-layer tests: pmfs against hand values and enumeration,
samplers against exact pmfs, the dispersion prior against quadrature and
its defining pushforward."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import chi2 as chi2_dist

from ilcset import (
    BernoulliPair,
    DispersionFamily,
    FamilyKind,
    GroundSet,
    HammingModel,
    Monotonicity,
    NonTerminationError,
    Subset,
    ValidationError,
    binomial_mode_property,
    binomial_pmf,
    calibrate_pair,
    check_hamming_monotone,
    dispersion_mean,
    enumerate_subsets,
    fisher_nch_pmf,
    hamming_log_pmf,
    overlap_outside,
    prior_density_u,
    sample_prior_u,
)
from ilcset.distributions import (
    sample_binomial_subsets,
    sample_fisher_subsets,
)
from ilcset.numerics import make_rng

from conftest import sub

FAM37 = DispersionFamily(FamilyKind.FISHER, 3, 7)
BIN37 = DispersionFamily(FamilyKind.BINOMIAL, 3, 7)


def chi2_pvalue(observed, probs):
    """Goodness of fit with adjacent-bin pooling at expectation 5."""
    n = observed.sum()
    expected = probs * n
    obs_p, exp_p, acc_o, acc_e = [], [], 0.0, 0.0
    for o, e in zip(observed, expected):
        acc_o, acc_e = acc_o + o, acc_e + e
        if acc_e >= 5:
            obs_p.append(acc_o)
            exp_p.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e and exp_p:
        obs_p[-1] += acc_o
        exp_p[-1] += acc_e
    obs_p, exp_p = np.array(obs_p), np.array(exp_p)
    stat = float(((obs_p - exp_p) ** 2 / exp_p).sum())
    return float(chi2_dist.sf(stat, len(obs_p) - 1))


class TestFisherPmf:
    def test_point_mass_limit(self):
        pmf = fisher_nch_pmf(0.0, FAM37)
        assert pmf[0] == 1.0 and pmf[1:].sum() == 0.0

    def test_uniform_at_one(self):
        # under u = 1 every subset has mass 1/120, so e_1(k) is the count fraction
        np.testing.assert_allclose(
            fisher_nch_pmf(1.0, FAM37), np.array([1, 21, 63, 35]) / 120, atol=1e-15
        )

    def test_half(self):
        raw = np.array([1.0, 10.5, 15.75, 4.375])
        np.testing.assert_allclose(
            fisher_nch_pmf(0.5, FAM37), raw / raw.sum(), atol=1e-15
        )

    def test_domain(self):
        with pytest.raises(ValidationError):
            fisher_nch_pmf(-0.1, FAM37)
        with pytest.raises(ValidationError):
            fisher_nch_pmf(1.5, FAM37)

    def test_normalized_for_all_u(self):
        for u in np.linspace(0.01, 1.0, 25):
            assert abs(fisher_nch_pmf(float(u), FAM37).sum() - 1) < 1e-12


class TestBinomialPmf:
    def test_endpoints(self):
        assert binomial_pmf(0.0, BIN37)[0] == 1.0
        assert binomial_pmf(1.0, BIN37)[3] == 1.0

    def test_symmetric(self):
        np.testing.assert_allclose(
            binomial_pmf(0.5, BIN37), np.array([1, 3, 3, 1]) / 8, atol=1e-15
        )

    def test_requires_matching_kind(self):
        with pytest.raises(ValidationError):
            binomial_pmf(0.5, FAM37)
        with pytest.raises(ValidationError):
            fisher_nch_pmf(0.5, BIN37)


class TestHammingLogPmf:
    def test_point_mass_at_center(self, ground10):
        a = sub(ground10, 1, 2, 3)
        model = HammingModel(a, 0.0, FAM37)
        assert hamming_log_pmf(model, a) == 0.0

    def test_uniform_mass(self, ground10):
        a = sub(ground10, 1, 2, 3)
        model = HammingModel(a, 1.0, FAM37)
        for x in [sub(ground10, 4, 6, 9), sub(ground10, 1, 2, 3)]:
            assert abs(hamming_log_pmf(model, x) - math.log(1 / 120)) < 1e-12

    def test_geometric_ratio(self, ground10):
        a = sub(ground10, 1, 2, 3)
        model = HammingModel(a, 0.5, FAM37)
        x1 = sub(ground10, 1, 2, 4)   # k = 1
        x2 = sub(ground10, 1, 4, 5)   # k = 2
        ratio = math.exp(hamming_log_pmf(model, x2) - hamming_log_pmf(model, x1))
        assert abs(ratio - 0.5) < 1e-12

    def test_geometric_identity_exact_in_log_space(self):
        for u in [0.05, 0.3, 0.77]:
            lq = FAM37.log_q_matrix([u])[0]
            lnu = math.log(u)
            for ka in range(4):
                for kb in range(4):
                    assert abs((lq[ka] - lq[kb]) - (ka - kb) * lnu) < 1e-12

    def test_normalization_over_subsets(self):
        for m, n in [(6, 2), (9, 3), (12, 4)]:
            g = GroundSet(m)
            a = Subset.from_indices(g, range(n))
            for u in [0.07, 0.5, 1.0]:
                fam = DispersionFamily(FamilyKind.FISHER, n, m - n)
                model = HammingModel(a, u, fam)
                total = sum(
                    math.exp(hamming_log_pmf(model, x))
                    for x in enumerate_subsets(g, n)
                )
                assert abs(total - 1.0) < 1e-9


def exhaustive_monotonicity(family, u, m):
    """Definition checked literally over all subset pairs, via enumeration."""
    g = GroundSet(m)
    a = Subset.from_indices(g, range(family.n))
    model = HammingModel(a, u, family)
    values = {}
    for x in enumerate_subsets(g, family.n):
        values.setdefault(overlap_outside(x, a), []).append(
            math.exp(hamming_log_pmf(model, x))
        )
    ks = sorted(values)
    non_inc = all(
        min(values[ks[i]]) >= max(values[ks[i + 1]]) for i in range(len(ks) - 1)
    )
    dec = all(
        min(values[ks[i]]) > max(values[ks[i + 1]]) for i in range(len(ks) - 1)
    )
    if dec:
        return Monotonicity.DECREASING
    if non_inc:
        return Monotonicity.NON_INCREASING
    return Monotonicity.NEITHER


class TestMonotonicity:
    def test_fisher_decreasing(self):
        assert check_hamming_monotone(family=FAM37, u=0.3) is Monotonicity.DECREASING

    def test_fisher_uniform(self):
        assert check_hamming_monotone(family=FAM37, u=1.0) is Monotonicity.NON_INCREASING

    def test_binomial_neither(self):
        assert check_hamming_monotone(family=BIN37, u=0.9) is Monotonicity.NEITHER

    def test_fisher_always_decreasing_small_sweep(self):
        for m in range(3, 13):
            for n in range(1, m):
                fam = DispersionFamily(FamilyKind.FISHER, n, m - n)
                for u in [0.05, 0.35, 0.8, 0.99]:
                    assert check_hamming_monotone(family=fam, u=u) is Monotonicity.DECREASING

    def test_verdicts_match_exhaustive(self):
        cases = [
            (FAM37, 0.3, 10), (FAM37, 1.0, 10), (BIN37, 0.9, 10),
            (BIN37, 0.3, 10), (BIN37, 0.5, 10),
            (DispersionFamily(FamilyKind.BINOMIAL, 2, 4), 0.65, 6),
        ]
        for fam, u, m in cases:
            assert check_hamming_monotone(family=fam, u=u) is exhaustive_monotonicity(fam, u, m)


class TestBinomialProposition:
    def test_small_instance_report(self):
        rep = binomial_mode_property(BIN37, 0.3)
        assert rep.unique_mode_premise and rep.unique_mode_holds

    def test_boundary_case(self):
        rep = binomial_mode_property(BIN37, 0.5)
        assert rep.decreasing_premise and rep.decreasing_holds

    def test_premise_violated(self):
        # at u = 0.75 > N/(N+n) the guarantee lapses; the exact check shows
        # the mode happens to survive here but fails by u = 0.9
        rep = binomial_mode_property(BIN37, 0.75)
        assert not rep.unique_mode_premise
        assert rep.unique_mode_holds
        assert not binomial_mode_property(BIN37, 0.9).unique_mode_holds

    def test_sweep(self):
        # the proposition's implications over every family with m <= 12
        for m in range(3, 13):
            for n in range(1, m):
                if n > m - n:
                    continue
                fam = DispersionFamily(FamilyKind.BINOMIAL, n, m - n)
                for u in np.arange(0.05, 1.0, 0.05):
                    rep = binomial_mode_property(fam, float(u))
                    if rep.unique_mode_premise:
                        assert rep.unique_mode_holds, (m, n, u)
                    if rep.decreasing_premise:
                        assert rep.decreasing_holds, (m, n, u)


class TestFisherSampler:
    def test_degenerate_pair_returns_center(self, ground10):
        a = sub(ground10, 1, 2, 3)
        rng = make_rng(0, "t")
        for s in sample_fisher_subsets(a, BernoulliPair(1.0, 0.0), 20, rng):
            assert s.mask == a.mask

    def test_pair_u_value(self):
        assert abs(BernoulliPair(0.8, 0.2).u - 1 / 16) < 1e-15
        assert BernoulliPair(1.0, 0.0).u == 0.0

    def test_uniform_case(self):
        g = GroundSet(6)
        a = Subset.from_indices(g, [0, 1])
        rng = make_rng(11, "uniform")
        draws = sample_fisher_subsets(a, BernoulliPair(0.5, 0.5), 100_000, rng)
        counts = np.zeros(15)
        masks = [s.mask for s in enumerate_subsets(g, 2)]
        index = {m: i for i, m in enumerate(masks)}
        for s in draws:
            counts[index[s.mask]] += 1
        p = chi2_pvalue(counts, np.full(15, 1 / 15))
        assert p > 0.01

    def test_k_histogram_matches_pmf(self, ground10):
        a = sub(ground10, 1, 2, 3)
        rng = make_rng(5, "hist")
        draws = sample_fisher_subsets(a, BernoulliPair(0.8, 0.2), 100_000, rng)
        ks = np.array([overlap_outside(x, a) for x in draws])
        observed = np.bincount(ks, minlength=4).astype(float)
        probs = fisher_nch_pmf(1 / 16, FAM37)
        assert chi2_pvalue(observed, probs) > 0.01

    def test_non_termination_guard(self, ground10):
        a = sub(ground10, 1, 2, 3)
        rng = make_rng(0, "cap")
        with pytest.raises(NonTerminationError):
            sample_fisher_subsets(a, BernoulliPair(0.0, 0.0), 1, rng, max_iterations=2000)


class TestBinomialSampler:
    def test_endpoints(self, ground10):
        a = sub(ground10, 1, 2, 3)
        rng = make_rng(0, "b")
        assert sample_binomial_subsets(a, 0.0, 5, rng) == [a] * 5
        for s in sample_binomial_subsets(a, 1.0, 5, rng):
            assert s.mask & a.mask == 0 and s.cardinality == 3

    def test_k_histogram_matches_binomial(self):
        g = GroundSet(8)
        a = Subset.from_indices(g, [0, 1, 2])
        fam = DispersionFamily(FamilyKind.BINOMIAL, 3, 5)
        rng = make_rng(4, "bh")
        draws = sample_binomial_subsets(a, 0.4, 100_000, rng)
        ks = np.array([overlap_outside(x, a) for x in draws])
        observed = np.bincount(ks, minlength=4).astype(float)
        assert chi2_pvalue(observed, binomial_pmf(0.4, fam)) > 0.01


class TestPriorDensity:
    def test_integrates_to_one(self):
        val, err = quad(prior_density_u, 1e-13, 1.0, limit=300)
        assert abs(val - 1.0) < 1e-8

    def test_value_at_one(self):
        assert abs(prior_density_u(1.0) - 1 / 3) < 1e-14
        # numerical limit from the closed form
        assert abs(prior_density_u(1 - 1e-5) - 1 / 3) < 1e-4

    def test_branch_continuity(self):
        # series branch and closed form agree where the implementation
        # switches between them
        u_at = 1 - 1e-4
        ub = np.longdouble(u_at)
        direct = float((4 * (1 - ub) + 2 * (ub + 1) * np.log(ub)) / (ub - 1) ** 3)
        assert abs(prior_density_u(u_at) - direct) < 1e-9
        assert abs(prior_density_u(u_at) - prior_density_u(u_at + 2e-12)) < 1e-9

    def test_domain(self):
        with pytest.raises(ValidationError):
            prior_density_u(0.0)
        with pytest.raises(ValidationError):
            prior_density_u(1.2)

    def test_pushforward_matches_density(self):
        # kernel-free histogram of u = odds(p2)/odds(p1) over the triangle
        rng = make_rng(7, "push")
        u = sample_prior_u(rng, 10**6)
        hist, edges = np.histogram(u, bins=50, range=(0.0, 1.0))
        probs = np.array(
            [
                quad(prior_density_u, max(edges[i], 1e-15), edges[i + 1], limit=200)[0]
                for i in range(50)
            ]
        )
        se = np.sqrt(probs * (1 - probs) * 10**6)
        dev = np.abs(hist - probs * 10**6) / se
        assert dev.max() < 3.0


class TestDispersionMean:
    def test_zero_limit(self):
        assert dispersion_mean(0.0, FAM37) == 0.0

    def test_binomial_exact(self):
        for u in [0.1, 0.4, 0.7]:
            assert abs(dispersion_mean(u, BIN37) - 3 * u) < 1e-12

    def test_fisher_uniform(self):
        assert abs(dispersion_mean(1.0, FAM37) - 2.1) < 1e-12


class TestCalibratePair:
    def test_mean_size_is_n(self):
        for u in [0.05, 0.3, 1.0]:
            pair = calibrate_pair(u, 10, 45)
            assert abs(10 * pair.p1 + 45 * pair.p2 - 10) < 1e-6
            if u > 0:
                assert abs(pair.u - u) < 1e-6

    def test_zero(self):
        assert calibrate_pair(0.0, 3, 7) == BernoulliPair(1.0, 0.0)
