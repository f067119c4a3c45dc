import math
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np
import pytest

from models import BFunctionSpec, Policy
from services.criteria_service import (
    INEQUALITY_CHECKS,
    dual_ladder_moments,
    er5001_check,
    induced_law_of,
    perpetuity_condition_sampler,
    perpetuity_moment_criterion,
    perpetuity_moment_sampler,
    size_biased_log_w1,
    size_biased_moment_sampler,
    symm_check,
    symmetrized_sup,
    tailin_check,
    tailsup_check,
    uniform_integrability_check,
)
from services.errors import ScenarioError
from services.law_service import ConstLaw, FiniteMQLaw, parse_mq_law
from services.point_process_service import BinaryLaw, SizeBiasedParetoLaw, parse_point_process
from services.stats_service import QUICK_GROWTH_SCHEDULE, moment_growth_diagnostic

SHORT_SCHEDULE = (256, 512, 1024, 2048)
HALF = "const:m=0.5,q=1"
SPLIT_Q = "finite:m=0.5/0.5,q=1/2,p=0.5/0.5"


def make_spec(text: str = "power:alpha=1") -> BFunctionSpec:
    return BFunctionSpec.parse(text)


def make_rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def make_gw12():
    return parse_point_process("gw:nmin=1,nmax=2,p=0.5")


# --- perpetuity moments ---


class TestPerpetuityMoment:
    def test_condition_vanishes_for_unit_q(self):
        sampler = perpetuity_condition_sampler(parse_mq_law(HALF), make_spec())
        np.testing.assert_allclose(sampler(make_rng(), 10), 0.0)

    def test_degenerate_law_converges(self):
        report = perpetuity_moment_criterion(parse_mq_law(HALF), make_spec(), make_rng(), schedule=SHORT_SCHEDULE)
        assert report.moment.verdict == "converging"
        assert report.condition.verdict == "converging"
        assert report.agree
        assert report.regime.case == "C1"

    def test_moment_values_of_degenerate_law(self):
        report = perpetuity_moment_criterion(parse_mq_law(HALF), make_spec(), make_rng(), schedule=SHORT_SCHEDULE)
        assert report.moment.means[-1] == pytest.approx(math.log(2.0))

    def test_logpareto_moment_boundary(self):
        finite = parse_mq_law("logpareto_q:m=0.5,beta=2.5")
        infinite = parse_mq_law("logpareto_q:m=0.5,beta=1.5")
        assert perpetuity_moment_criterion(finite, make_spec(), make_rng(1), schedule=QUICK_GROWTH_SCHEDULE).moment.verdict == "converging"
        assert perpetuity_moment_criterion(infinite, make_spec(), make_rng(1), schedule=QUICK_GROWTH_SCHEDULE).moment.verdict == "diverging"

    def test_logpareto_criterion_agrees_away_from_boundary(self):
        light = perpetuity_moment_criterion(
            parse_mq_law("logpareto_q:m=0.5,beta=5"), make_spec(), make_rng(2), schedule=QUICK_GROWTH_SCHEDULE
        )
        heavy = perpetuity_moment_criterion(
            parse_mq_law("logpareto_q:m=0.5,beta=1.2"), make_spec(), make_rng(2), schedule=QUICK_GROWTH_SCHEDULE
        )
        assert light.agree and light.moment.verdict == "converging"
        assert heavy.agree and heavy.moment.verdict == "diverging"

    def test_logpareto_needs_finite_log_moment(self):
        with pytest.raises(ScenarioError):
            perpetuity_moment_sampler(parse_mq_law("logpareto_q:m=0.5,beta=0.8"), make_spec())(make_rng(), 16)


# --- size-biased W_1 ---


class TestSizeBiasedW1:
    def test_binary_w1_is_one(self):
        np.testing.assert_allclose(size_biased_log_w1(BinaryLaw(), make_rng(), 20), 0.0)

    def test_gw_support(self):
        values = size_biased_log_w1(make_gw12(), make_rng(), 500)
        assert set(np.round(values, 12)) <= {round(math.log(2 / 3), 12), round(math.log(4 / 3), 12)}

    def test_gw_j_moment_is_one(self):
        sampler = size_biased_moment_sampler(make_gw12(), None)
        np.testing.assert_allclose(sampler(make_rng(), 100), 1.0)

    def test_b_weight_multiplies_j_moment(self):
        pp = SizeBiasedParetoLaw(2.5)
        level = np.maximum(size_biased_log_w1(pp, make_rng(3), 200), 0.0)
        plain = size_biased_moment_sampler(pp, None)(make_rng(3), 200)
        weighted = size_biased_moment_sampler(pp, make_spec())(make_rng(3), 200)
        np.testing.assert_allclose(weighted, level * plain)

    def test_sbpareto_b_moment_boundary(self):
        light = moment_growth_diagnostic(
            size_biased_moment_sampler(SizeBiasedParetoLaw(6.0), make_spec()), make_rng(4), QUICK_GROWTH_SCHEDULE
        )
        heavy = moment_growth_diagnostic(
            size_biased_moment_sampler(SizeBiasedParetoLaw(1.2), make_spec()), make_rng(4), QUICK_GROWTH_SCHEDULE
        )
        assert light.verdict == "converging"
        assert heavy.verdict == "diverging"

    def test_induced_law_of(self):
        assert isinstance(induced_law_of(make_gw12()), FiniteMQLaw)
        assert isinstance(induced_law_of(SizeBiasedParetoLaw(2.0)), ConstLaw)


# --- uniform integrability ---


class TestUniformIntegrability:
    def test_binary(self):
        report = uniform_integrability_check(BinaryLaw(), 100, make_rng(), horizon=5, schedule=SHORT_SCHEDULE)
        assert report.pi_to_zero
        assert report.predicted_ui
        assert report.mean_w.estimate == pytest.approx(1.0)
        assert report.agree
        assert report.horizon == 5

    def test_horizon_capped(self):
        report = uniform_integrability_check(
            BinaryLaw(), 10, make_rng(), Policy(gen_cap=4), horizon=20, schedule=SHORT_SCHEDULE
        )
        assert report.horizon == 4

    def test_explosion_leaves_mean_unavailable(self):
        report = uniform_integrability_check(
            BinaryLaw(), 10, make_rng(), Policy(pop_cap=100), horizon=12, schedule=SHORT_SCHEDULE
        )
        assert report.mean_w is None
        assert report.explosion
        assert report.agree is None


# --- tail inequalities ---


class TestSymmetrization:
    def test_const_law_is_degenerate(self):
        sups, sup_even, degenerate = symmetrized_sup(parse_mq_law(HALF), make_rng(), 10)
        assert degenerate
        np.testing.assert_allclose(sups, 0.0)
        np.testing.assert_allclose(sup_even, 1.0)

    def test_symm_holds(self):
        assert symm_check(parse_mq_law(SPLIT_Q), 2000, make_rng(1)).passed

    def test_tailin_degenerate(self):
        report = tailin_check(parse_mq_law(HALF), 100, make_rng())
        assert report.degenerate
        assert math.isnan(report.best_c)
        assert not report.passed

    def test_tailin_finds_constant(self):
        report = tailin_check(parse_mq_law(SPLIT_Q), 2000, make_rng(2))
        assert not report.degenerate
        assert 0 < report.best_c <= 1.0


class TestTailsup:
    def test_checks_some_points(self):
        report = tailsup_check(make_gw12(), 2000, make_rng(3), horizon=6)
        assert report.mode == "existential"
        assert report.checked > 0


class TestEr5001:
    def test_uniform(self):
        report = er5001_check(parse_mq_law("uniform:q=1"), 2000, make_rng(4))
        assert report.passed
        assert [p.t for p in report.points] == [0.5, 0.1, 0.01]

    def test_half_law_is_tight_at_one_half(self):
        report = er5001_check(parse_mq_law(HALF), 50, make_rng())
        assert report.points[0].lhs == pytest.approx(2.0)
        assert report.points[0].rhs == pytest.approx(2.0)
        assert report.passed

    def test_registry(self):
        assert set(INEQUALITY_CHECKS) == {"symm", "tailin", "tailsup", "er5001"}


# --- dual ladder ---


class TestDualLadder:
    def test_two_sided_law(self):
        report = dual_ladder_moments(
            parse_mq_law("twopoint:m1=2,p1=0.5,m2=0.125,q=1"), make_spec(), 64, make_rng(5), horizon=256
        )
        assert report.c == pytest.approx(4 * math.e)
        assert 0.0 < report.reached < 1.0
        assert report.sup_pi.estimate >= report.pi_at_sigma_star.estimate - 1e-12

    def test_contracting_law_never_crosses(self):
        report = dual_ladder_moments(parse_mq_law(HALF), make_spec(), 16, make_rng(), horizon=64)
        assert report.reached == 0.0
        assert report.pi_at_sigma_star.estimate == 0.0
