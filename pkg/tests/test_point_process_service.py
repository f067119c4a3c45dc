import math
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np
import pytest

from services.errors import DegenerateBRW, NotEnumerable, UnboundedDensity
from services.point_process_service import (
    POINT_PROCESS_FORMS,
    BinaryLaw,
    GaltonWatsonLaw,
    PoissonLaw,
    SizeBiasedParetoLaw,
    estimate_m_gamma,
    induced_M_law,
    induced_M_sample,
    induced_m_evaluator,
    induced_Q_and_W1_law,
    parse_point_process,
    require_supercritical,
    tilted_reproduction_law,
)


def make_gw12() -> GaltonWatsonLaw:
    return parse_point_process("gw:nmin=1,nmax=2,p=0.5")


# --- parse_point_process ---


class TestParsePointProcess:
    def test_every_stock_form_parses(self):
        for name, text in POINT_PROCESS_FORMS.items():
            assert parse_point_process(text).id.startswith(name)

    def test_missing_required(self):
        with pytest.raises(ValueError):
            parse_point_process("gw:nmin=1,p=0.5")

    def test_unknown_parameter(self):
        with pytest.raises(ValueError):
            parse_point_process("binary:gamma=1,x=2")

    def test_unknown_law(self):
        with pytest.raises(ValueError):
            parse_point_process("yule:rate=1")

    def test_subcritical_poisson_rejected(self):
        with pytest.raises(ValueError):
            PoissonLaw(0.5)


# --- basic quantities ---


class TestFinitePointProcess:
    def test_gw_means(self):
        gw = make_gw12()
        assert gw.m_gamma == pytest.approx(1.5)
        assert gw.mean_offspring() == pytest.approx(1.5)
        assert gw.is_supercritical()
        assert gw.constant_displacement() == 0.0

    def test_binary_weights_are_half(self):
        binary = BinaryLaw()
        assert binary.m_gamma == pytest.approx(1.0)
        batch = binary.sample_batch(np.random.default_rng(), 5)
        np.testing.assert_array_equal(batch.counts, [2] * 5)
        np.testing.assert_allclose(batch.tilts, 0.5)

    def test_batch_parents_follow_counts(self):
        batch = make_gw12().sample_batch(np.random.default_rng(2), 100)
        assert batch.parents.size == batch.counts.sum()
        np.testing.assert_array_equal(np.bincount(batch.parents, minlength=100), batch.counts)

    def test_subcritical_rejected(self):
        with pytest.raises(DegenerateBRW):
            require_supercritical(GaltonWatsonLaw(0, 1, 0.5))

    def test_poisson_enumeration_sums_to_one(self):
        configs = PoissonLaw(2.0).enumerate()
        assert math.fsum(p for _, p in configs) == pytest.approx(1.0)


# --- induced laws ---


class TestInducedLaws:
    def test_gw_induced_m_law(self):
        law = induced_M_law(make_gw12())
        atoms = sorted(law.support(), key=lambda a: a[0][1])
        assert [a[0][0] for a in atoms] == pytest.approx([2 / 3, 2 / 3])
        assert [a[0][1] for a in atoms] == pytest.approx([2 / 3, 4 / 3])
        assert [a[1] for a in atoms] == pytest.approx([1 / 3, 2 / 3])
        assert law.dependence == "independent"

    def test_gw_induced_mean_of_z(self):
        analytics = induced_M_law(make_gw12()).analytics()
        assert analytics.e_q / (1 - analytics.e_m) == pytest.approx(10 / 3)

    def test_binary_is_the_half_law(self):
        law = induced_M_law(BinaryLaw())
        assert law.support() == [((0.5, 1.0), 1.0)]
        assert law.fixed_point() == pytest.approx(2.0)

    def test_single_child_is_degenerate(self):
        with pytest.raises(DegenerateBRW):
            induced_M_law(GaltonWatsonLaw(1, 1, 1.0))

    def test_not_enumerable(self):
        with pytest.raises(NotEnumerable):
            induced_M_law(SizeBiasedParetoLaw(2.0))

    def test_w1_and_q_laws(self):
        w1, q = induced_Q_and_W1_law(make_gw12())
        np.testing.assert_allclose(w1.values, [2 / 3, 4 / 3])
        np.testing.assert_allclose(w1.probs, [0.5, 0.5])
        np.testing.assert_allclose(q.probs, [1 / 3, 2 / 3])
        assert w1.mean() == pytest.approx(1.0)

    def test_constant_displacement_evaluator(self):
        pp = SizeBiasedParetoLaw(2.0)
        evaluator = induced_m_evaluator(pp)
        assert evaluator.A(100.0) == pytest.approx(math.log(pp.m_gamma))

    def test_empirical_m_sample_matches_exact(self):
        sample = induced_M_sample(make_gw12(), np.random.default_rng(8), parents=20_000)
        assert sample.mean_log() == pytest.approx(math.log(2 / 3))
        assert float(np.sum(sample.weights)) == pytest.approx(1.0, abs=0.03)


# --- tilting ---


class TestTilting:
    def test_exact_tilt_size_biases(self):
        tilted = tilted_reproduction_law(make_gw12())
        np.testing.assert_allclose(tilted.probs, [1 / 3, 2 / 3])
        assert tilted.mean_offspring() == pytest.approx(5 / 3)

    def test_finite_laws_declare_bound(self):
        assert make_gw12().density_bound == pytest.approx(2.0)
        assert BinaryLaw().density_bound == pytest.approx(1.0)

    def test_rejection_needs_bound(self):
        with pytest.raises(UnboundedDensity):
            tilted_reproduction_law(PoissonLaw(2.0), "rejection")

    def test_rejection_matches_importance_weights(self):
        base = make_gw12()
        rejection = tilted_reproduction_law(base, "rejection")
        importance = tilted_reproduction_law(base, "importance")
        drawn = rejection.sample_batch(np.random.default_rng(2), 40_000)
        weighted = importance.sample_batch(np.random.default_rng(3), 40_000)
        assert drawn.counts.size == 40_000
        assert rejection.mean_offspring() == pytest.approx(5 / 3)
        assert drawn.counts.mean() == pytest.approx(5 / 3, abs=0.02)
        assert np.mean(weighted.counts * importance.config_weights(weighted)) == pytest.approx(drawn.counts.mean(), abs=0.03)

    def test_rejection_detects_broken_bound(self):
        base = make_gw12()
        base.density_bound = 1.5
        with pytest.raises(UnboundedDensity):
            tilted_reproduction_law(base, "rejection").sample_batch(np.random.default_rng(1), 1_000)

    def test_importance_weights(self):
        tilted = tilted_reproduction_law(make_gw12(), "importance")
        batch = tilted.sample_batch(np.random.default_rng(1), 50)
        np.testing.assert_allclose(tilted.config_weights(batch), batch.counts / 1.5)

    def test_sbpareto_tilt_draws_biased_counts(self):
        tilted = tilted_reproduction_law(SizeBiasedParetoLaw(3.0))
        batch = tilted.sample_batch(np.random.default_rng(4), 100)
        assert np.all(batch.counts >= 3)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            tilted_reproduction_law(make_gw12(), "bogus")


# --- size-biased Pareto ---


class TestSizeBiasedPareto:
    def test_counts_at_least_three(self):
        pp = SizeBiasedParetoLaw(2.0)
        assert np.all(pp.sample_counts(np.random.default_rng(3), 1000) >= 3)
        assert pp.mean_offspring() >= 3.0

    def test_rejects_nonpositive_beta(self):
        with pytest.raises(ValueError):
            SizeBiasedParetoLaw(0.0)


# --- estimate_m_gamma ---


class TestEstimateMGamma:
    def test_enumerable_is_exact(self):
        report = estimate_m_gamma(make_gw12(), 1.0, 100, np.random.default_rng())
        assert report.estimate == pytest.approx(1.5)
        assert report.stderr == 0.0

    def test_other_gamma(self):
        gw = parse_point_process("gw:nmin=1,nmax=2,p=0.5,x=1")
        report = estimate_m_gamma(gw, 2.0, 100, np.random.default_rng())
        assert report.estimate == pytest.approx(1.5 * math.exp(2.0))

    def test_needs_enough_samples(self):
        with pytest.raises(ValueError):
            estimate_m_gamma(make_gw12(), 1.0, 10, np.random.default_rng())
