import math
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np
import pytest

from models import Policy
from services.brw_service import (
    Generation,
    check_fixpoint,
    exact_w_law,
    forest_trajectories,
    grafted_law,
    grow,
    martingale_trajectory,
    maximal_W,
    root_generation,
    sample_w,
    size_biased_log_weights,
)
from services.errors import DegenerateBRW, Extinct, PopulationExplosion
from services.point_process_service import BinaryLaw, GaltonWatsonLaw, parse_point_process
from services.stats_service import RunningMoments


def make_gw12() -> GaltonWatsonLaw:
    return parse_point_process("gw:nmin=1,nmax=2,p=0.5")


def make_rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


# --- single trees ---


class TestGrow:
    def test_root(self):
        root = root_generation(BinaryLaw())
        assert root.population == 1
        assert root.W == 1.0
        assert root.summary()["n"] == 0

    def test_binary_keeps_w_at_one(self):
        gen = root_generation(BinaryLaw())
        for _ in range(4):
            gen = grow(gen, BinaryLaw(), make_rng())
        assert gen.population == 16
        assert gen.W == pytest.approx(1.0)
        np.testing.assert_allclose(gen.logweights, 4 * math.log(0.5))

    def test_extinct_generation(self):
        empty = Generation(np.empty(0), np.empty(0), np.empty(0), 2)
        with pytest.raises(Extinct):
            grow(empty, BinaryLaw(), make_rng())

    def test_gen_cap(self):
        policy = Policy(gen_cap=1)
        gen = grow(root_generation(BinaryLaw()), BinaryLaw(), make_rng(), policy)
        with pytest.raises(ValueError):
            grow(gen, BinaryLaw(), make_rng(), policy)

    def test_population_cap(self):
        gen = root_generation(BinaryLaw())
        policy = Policy(pop_cap=4)
        gen = grow(grow(gen, BinaryLaw(), make_rng(), policy), BinaryLaw(), make_rng(), policy)
        with pytest.raises(PopulationExplosion) as exc_info:
            grow(gen, BinaryLaw(), make_rng(), policy)
        assert exc_info.value.population == 8


class TestMartingaleTrajectory:
    def test_length_and_start(self):
        trajectory = martingale_trajectory(make_gw12(), 5, make_rng(1))
        assert len(trajectory.W) == 6
        assert trajectory.W[0] == 1.0
        assert not trajectory.extinct
        assert all(b >= a for a, b in zip(trajectory.populations, trajectory.populations[1:]))

    def test_truncated_at_gen_cap(self):
        trajectory = martingale_trajectory(BinaryLaw(), 10, make_rng(), Policy(gen_cap=3))
        assert trajectory.truncated
        assert len(trajectory.W) == 4

    def test_explosion_keeps_partial(self):
        with pytest.raises(PopulationExplosion) as exc_info:
            martingale_trajectory(BinaryLaw(), 6, make_rng(), Policy(pop_cap=8))
        assert exc_info.value.partial == pytest.approx([1.0, 1.0, 1.0, 1.0])

    def test_subcritical_rejected(self):
        with pytest.raises(DegenerateBRW):
            martingale_trajectory(GaltonWatsonLaw(0, 1, 0.5), 3, make_rng())


# --- forests ---


class TestForest:
    def test_binary_rows_are_constant(self):
        np.testing.assert_allclose(forest_trajectories(BinaryLaw(), 4, 10, make_rng()), 1.0)

    def test_mean_one(self):
        values = sample_w(make_gw12(), 6, 20_000, make_rng(2))
        moments = RunningMoments.of(values)
        assert abs(moments.mean - 1.0) <= 4 * moments.stderr

    def test_extinction_pads_zero(self):
        pp = parse_point_process("gw:nmin=0,nmax=2,p=0.25")
        trajectories = forest_trajectories(pp, 4, 2000, make_rng(3))
        extinct = trajectories[:, 1] == 0
        assert extinct.any()
        assert np.all(trajectories[extinct, -1] == 0)

    def test_horizon_within_gen_cap(self):
        with pytest.raises(ValueError):
            forest_trajectories(make_gw12(), 5, 10, make_rng(), Policy(gen_cap=4))

    def test_maximal_w(self):
        np.testing.assert_allclose(maximal_W(np.array([[1.0, 2.0, 0.5], [1.0, 0.0, 0.0]])), [2.0, 1.0])

    def test_size_biased_pick_on_binary(self):
        logw = size_biased_log_weights(BinaryLaw(), 3, 5, make_rng())
        np.testing.assert_allclose(logw, 3 * math.log(0.5))


# --- exact laws ---


class TestExactW:
    def test_binary_is_degenerate(self):
        assert exact_w_law(BinaryLaw(), 3).atoms() == [(1.0, 1.0)]

    def test_gw_one_step(self):
        law = exact_w_law(make_gw12(), 1)
        np.testing.assert_allclose(law.values, [2 / 3, 4 / 3])
        assert law.moment(np.square) == pytest.approx(10 / 9)

    def test_mean_is_one(self):
        assert exact_w_law(make_gw12(), 3).mean() == pytest.approx(1.0)

    def test_grafting_matches_direct(self):
        assert grafted_law(make_gw12(), 1, 1).matches(exact_w_law(make_gw12(), 2))
        assert grafted_law(make_gw12(), 2, 1).matches(exact_w_law(make_gw12(), 3))


class TestCheckFixpoint:
    def test_gw_passes(self):
        report = check_fixpoint(make_gw12(), 1, 1, make_rng(4), 4000)
        assert report.exact_match
        assert report.passed

    def test_deep_split_uses_ks_only(self):
        report = check_fixpoint(make_gw12(), 2, 2, make_rng(5), 2000)
        assert report.exact_match is None
        assert report.ks is not None

    def test_depth_within_gen_cap(self):
        with pytest.raises(ValueError):
            check_fixpoint(make_gw12(), 2, 2, make_rng(), 10, Policy(gen_cap=3))
