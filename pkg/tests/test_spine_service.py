import math
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np
import pytest

from services.errors import UnsupportedTilting
from services.point_process_service import BinaryLaw, SizeBiasedParetoLaw, parse_point_process
from services.spine_service import (
    FUNCTIONALS,
    exact_size_biasing_one_step,
    gw12_second_moment,
    jensen_bound_check,
    lower_bound_check,
    reciprocal_martingale_check,
    remainder_means,
    second_moment,
    simulate_what,
    size_biasing_check,
    spine_batch,
    spine_step,
    survival_probability,
    verify_spine_identity,
)
from services.stats_service import RunningMoments


def make_gw12():
    return parse_point_process("gw:nmin=1,nmax=2,p=0.5")


def make_rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


# --- single spines ---


class TestSpineStep:
    def test_binary_step(self):
        step = spine_step(BinaryLaw(), make_rng())
        assert step.M == pytest.approx(0.5)
        assert step.Q == pytest.approx(1.0)
        assert step.weight == 1.0

    def test_gw_step_is_size_biased(self):
        steps = [spine_step(make_gw12(), make_rng(i)) for i in range(200)]
        assert all(s.M == pytest.approx(2 / 3) for s in steps)
        assert {round(s.Q, 6) for s in steps} <= {round(2 / 3, 6), round(4 / 3, 6)}

    def test_exact_mode_needs_enumeration(self):
        with pytest.raises(UnsupportedTilting):
            spine_step(SizeBiasedParetoLaw(2.0), make_rng())


class TestSimulateWhat:
    def test_binary_identity(self):
        path = simulate_what(BinaryLaw(), 3, make_rng())
        residuals = verify_spine_identity(path)
        assert path.what == pytest.approx(1.0)
        assert residuals.passed
        assert residuals.paper_value == pytest.approx(2.75)

    def test_gw_identity(self):
        for seed in range(5):
            path = simulate_what(make_gw12(), 4, make_rng(seed))
            assert verify_spine_identity(path).passed
            assert path.pi[-1] == pytest.approx((2 / 3) ** 4)

    def test_summary_keys(self):
        summary = simulate_what(make_gw12(), 2, make_rng()).summary()
        assert set(summary) == {"n", "what", "pi_n", "q", "m", "resid_decomp", "resid_closed", "resid_paper"}
        assert summary["resid_paper"] >= 0.0


# --- batches ---


class TestSpineBatch:
    def test_binary_batch(self):
        batch = spine_batch(BinaryLaw(), 3, 10, make_rng())
        np.testing.assert_allclose(batch.m, 0.5)
        np.testing.assert_allclose(batch.what(), 1.0)
        closed, shifted = batch.residuals()
        assert closed.max() < 1e-12
        np.testing.assert_allclose(shifted, 2.75)
        np.testing.assert_allclose(batch.z_majorant(), 1.75)

    def test_trajectory_starts_at_one(self):
        batch = spine_batch(make_gw12(), 3, 50, make_rng(1))
        np.testing.assert_allclose(batch.what_trajectory()[:, 0], 1.0)

    def test_mean_is_second_moment(self):
        batch = spine_batch(make_gw12(), 3, 20_000, make_rng(2))
        moments = RunningMoments.of(batch.what())
        assert abs(moments.mean - gw12_second_moment(3)) <= 4 * moments.stderr

    def test_rejection_mode_mean(self):
        batch = spine_batch(make_gw12(), 3, 20_000, make_rng(5), mode="rejection")
        moments = RunningMoments.of(batch.what())
        np.testing.assert_allclose(batch.weights, 1.0)
        assert abs(moments.mean - gw12_second_moment(3)) <= 4 * moments.stderr

    def test_importance_weights_on_binary(self):
        batch = spine_batch(BinaryLaw(), 2, 5, make_rng(), mode="importance")
        np.testing.assert_allclose(batch.weights, 1.0)

    def test_lower_bounds(self):
        assert lower_bound_check(spine_batch(make_gw12(), 4, 500, make_rng(3))).passed

    def test_lower_bounds_empty_horizon(self):
        report = lower_bound_check(spine_batch(make_gw12(), 0, 5, make_rng()))
        assert report.passed
        assert report.reps == 5

    def test_binary_remainders_vanish(self):
        means = remainder_means(spine_batch(BinaryLaw(), 3, 20, make_rng()))
        assert [r.estimate for r in means] == pytest.approx([0.0, 0.0, 0.0])

    def test_jensen(self):
        report = jensen_bound_check(spine_batch(make_gw12(), 3, 2000, make_rng(4)), np.log1p)
        assert report.passed


# --- moments and size-biasing ---


class TestMoments:
    def test_closed_form_matches_enumeration(self):
        for n in range(1, 5):
            assert second_moment(make_gw12(), n) == pytest.approx(gw12_second_moment(n))

    def test_one_step_exact(self):
        lhs, rhs = exact_size_biasing_one_step(make_gw12(), lambda x: x)
        assert lhs == pytest.approx(10 / 9)
        assert rhs == pytest.approx(lhs)

    def test_size_biasing(self):
        report = size_biasing_check(make_gw12(), 2, FUNCTIONALS["log1p"], 20_000, make_rng(5))
        assert report.passed

    def test_size_biasing_one_step_has_exact(self):
        report = size_biasing_check(make_gw12(), 1, FUNCTIONALS["identity"], 5000, make_rng(6))
        assert report.exact is not None
        assert report.exact[0] == pytest.approx(report.exact[1])


class TestReciprocal:
    def test_survival_probability(self):
        assert survival_probability(make_gw12(), 3) == 1.0
        assert survival_probability(parse_point_process("gw:nmin=0,nmax=2,p=0.25"), 1) == pytest.approx(0.75)

    def test_binary_is_exact(self):
        report = reciprocal_martingale_check(BinaryLaw(), 3, 50, make_rng())
        assert report.passed
        assert report.exact_first == pytest.approx(1.0)

    def test_gw(self):
        report = reciprocal_martingale_check(make_gw12(), 3, 20_000, make_rng(7))
        assert report.passed
        assert report.targets == [1.0, 1.0, 1.0]
