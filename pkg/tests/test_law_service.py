import math
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np
import pytest

from services.errors import Inconclusive, SamplerViolation, UndefinedJ0
from services.law_service import (
    MQ_LAW_FORMS,
    ConstLaw,
    FiniteMQLaw,
    MQLaw,
    a_evaluator,
    classify_regime,
    draw,
    empirical_a_evaluator,
    parse_mq_law,
    sample_mq,
)


def make_rng(seed: int = 1) -> np.random.Generator:
    return np.random.default_rng(seed)


class ZeroMLaw(MQLaw):
    id = "zero-m"

    def sample(self, rng, size):
        return np.zeros(size), np.ones(size)


class UnitLaw(MQLaw):
    id = "unit"

    def sample(self, rng, size):
        return np.ones(size), np.ones(size)


class SamplerOnlyLaw(MQLaw):
    """M = e^{-xi} with xi ~ N(mu, 1) and no analytics."""

    def __init__(self, mu: float):
        self.mu = mu
        self.id = f"sampler:mu={mu:g}"

    def sample(self, rng, size):
        return np.exp(-rng.normal(self.mu, 1.0, size)), np.ones(size)


# --- parse_mq_law ---


class TestParseMQLaw:
    def test_every_stock_form_parses(self):
        for name, text in MQ_LAW_FORMS.items():
            law = parse_mq_law(text)
            assert law.id.startswith(name)

    def test_const(self):
        law = parse_mq_law("const:m=0.5,q=1")
        assert isinstance(law, ConstLaw)
        assert law.support() == [((0.5, 1.0), 1.0)]

    def test_finite_columns(self):
        law = parse_mq_law("finite:m=0.5/0.5,q=1/2,p=0.5/0.5")
        assert isinstance(law, FiniteMQLaw)
        assert law.dependence == "independent"

    def test_finite_unequal_columns(self):
        with pytest.raises(ValueError):
            parse_mq_law("finite:m=0.5/0.25,q=1,p=0.5/0.5")

    def test_unknown_parameter(self):
        with pytest.raises(ValueError):
            parse_mq_law("uniform:q=1,z=3")

    def test_unknown_law(self):
        with pytest.raises(ValueError):
            parse_mq_law("cauchy:q=1")

    def test_not_a_number(self):
        with pytest.raises(ValueError):
            parse_mq_law("const:m=half")


# --- FiniteMQLaw ---


class TestFiniteMQLaw:
    def test_rejects_bad_mass(self):
        with pytest.raises(ValueError):
            FiniteMQLaw([(0.5, 1.0, 0.6), (0.25, 1.0, 0.6)])

    def test_rejects_zero_m(self):
        with pytest.raises(ValueError):
            FiniteMQLaw([(0.0, 1.0, 1.0)])

    def test_rejects_q_identically_zero(self):
        with pytest.raises(ValueError):
            FiniteMQLaw([(0.5, 0.0, 1.0)])

    def test_coupled_when_both_vary(self):
        law = FiniteMQLaw([(0.5, 1.0, 0.5), (0.25, 2.0, 0.5)])
        assert law.dependence == "coupled"
        with pytest.raises(ValueError):
            law.sample_q(make_rng(), 4)

    def test_fixed_point_of_const(self):
        assert parse_mq_law("const:m=0.5,q=1").fixed_point() == pytest.approx(2.0)

    def test_no_fixed_point(self):
        assert parse_mq_law("finite:m=0.5/0.5,q=1/2,p=0.5/0.5").fixed_point() is None

    def test_shared_fixed_point(self):
        # Q + M*2 = 2 on both atoms
        law = FiniteMQLaw([(0.5, 1.0, 0.5), (0.25, 1.5, 0.5)])
        assert law.fixed_point() == pytest.approx(2.0)

    def test_analytics_means(self):
        analytics = parse_mq_law("twopoint:m1=2,p1=0.5,m2=0.125,q=1").analytics()
        assert analytics.e_m == pytest.approx(1.0625)
        assert analytics.e_q == pytest.approx(1.0)
        assert analytics.e_log_abs_m == pytest.approx(-math.log(2.0))


# --- draw ---


class TestDraw:
    def test_rejects_zero_m(self):
        with pytest.raises(SamplerViolation):
            draw(ZeroMLaw(), make_rng(), 3)

    def test_sample_mq_scalars(self):
        m, q = sample_mq(parse_mq_law("const:m=0.5,q=1"), make_rng())
        assert (m, q) == (0.5, 1.0)

    def test_uniform_in_unit_interval(self):
        m, q = draw(parse_mq_law("uniform:q=1"), make_rng(), 10_000)
        assert np.all((m > 0) & (m <= 1))
        assert np.all(q == 1.0)

    def test_same_seed_same_draws(self):
        law = parse_mq_law("lognormal:mu=0.5,sigma=1,q=1")
        a, _ = draw(law, make_rng(5), 100)
        b, _ = draw(law, make_rng(5), 100)
        np.testing.assert_array_equal(a, b)


# --- AEvaluator ---


class TestAEvaluator:
    def test_half_law(self):
        evaluator = a_evaluator(parse_mq_law("const:m=0.5,q=1"))
        assert evaluator.A(0.3) == pytest.approx(0.3)
        assert evaluator.A(5.0) == pytest.approx(math.log(2.0))
        assert evaluator.J(5.0) == pytest.approx(5.0 / math.log(2.0))

    def test_uniform_closed_form(self):
        evaluator = a_evaluator(parse_mq_law("uniform:q=1"))
        assert evaluator.A(1.0) == pytest.approx(1.0 - math.exp(-1.0))

    def test_j_at_zero_and_negative(self):
        evaluator = a_evaluator(parse_mq_law("uniform:q=1"))
        assert evaluator.J(0.0) == pytest.approx(1.0)
        assert evaluator.J(-1.0) == 0.0
        assert evaluator.A(-1.0) == 0.0

    def test_j_undefined(self):
        evaluator = a_evaluator(parse_mq_law("const:m=2,q=1"))
        with pytest.raises(UndefinedJ0):
            evaluator.J(1.0)

    def test_lognormal_matches_quadrature(self):
        law = parse_mq_law("lognormal:mu=0.5,sigma=1,q=1")
        evaluator = a_evaluator(law)
        xi = -np.log(draw(law, make_rng(3), 200_000)[0])
        empirical = np.mean(np.minimum(np.maximum(xi, 0.0), 2.0))
        assert evaluator.A(2.0) == pytest.approx(empirical, abs=0.01)

    def test_empirical_matches_closed_form(self):
        rng = make_rng(4)
        xi = rng.exponential(1.0, 100_000)
        evaluator = empirical_a_evaluator(xi)
        assert evaluator.mode == "empirical"
        assert evaluator.A(1.0) == pytest.approx(1.0 - math.exp(-1.0), abs=0.01)

    def test_no_analytics(self):
        with pytest.raises(ValueError):
            a_evaluator(SamplerOnlyLaw(0.5))


# --- classify_regime ---


class TestClassifyRegime:
    def test_contracting_is_c1(self):
        report = classify_regime(parse_mq_law("uniform:q=1"))
        assert report.case == "C1"
        assert report.subcase == "A1"
        assert not report.empirical

    def test_two_sided_is_c2(self):
        assert classify_regime(parse_mq_law("twopoint:m1=2,p1=0.5,m2=0.125,q=1")).case == "C2"

    def test_expanding_is_divergent(self):
        assert classify_regime(parse_mq_law("const:m=2,q=1")).case == "divergent"

    def test_heavy_ladder_subcase(self):
        report = classify_regime(parse_mq_law("heavyladder:scale=1,q=1"))
        assert report.case == "C1"
        assert report.subcase == "A2"

    def test_erickson_uses_j_moment(self):
        assert classify_regime(parse_mq_law("erickson:p=0.5,aplus=0.6,aminus=0.3")).case == "C2"
        assert classify_regime(parse_mq_law("erickson:p=0.5,aplus=0.3,aminus=0.6")).case == "divergent"

    def test_empirical_contracting(self):
        report = classify_regime(SamplerOnlyLaw(1.0), budget=1 << 14, rng=make_rng())
        assert report.case == "C2"
        assert report.empirical

    def test_empirical_expanding(self):
        assert classify_regime(SamplerOnlyLaw(-1.0), budget=1 << 14, rng=make_rng()).case == "divergent"

    def test_empirical_needs_budget(self):
        with pytest.raises(ValueError):
            classify_regime(SamplerOnlyLaw(1.0))

    def test_inconclusive_carries_evidence(self):
        with pytest.raises(Inconclusive) as exc_info:
            classify_regime(UnitLaw(), budget=256, rng=make_rng())
        assert "mean_log_abs_m" in exc_info.value.evidence
