import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from utils.grid_utils import (
    concavity_defect,
    geometric_grid,
    nondecreasing_defect,
    nonincreasing_defect,
    pair_grid,
    tail_grid,
)


# --- geometric_grid ---


class TestGeometricGrid:
    def test_default_spans_decades_with_zero(self):
        grid = geometric_grid()
        assert grid[0] == 0.0
        assert grid[1] == 1e-3
        assert grid[-1] == 1e6
        assert grid.size == 9 * 64 + 2

    def test_without_zero(self):
        grid = geometric_grid(1.0, 100.0, per_decade=4, include_zero=False)
        assert grid.size == 9
        assert np.all(np.diff(grid) > 0)

    def test_tail_grid_reaches_far(self):
        grid = tail_grid()
        assert grid[0] == 1e3
        assert grid[-1] == 1e200

    def test_pair_grid_shapes(self):
        x, y = pair_grid(1.0, 10.0, per_decade=2)
        assert x.shape == y.shape == (3, 3)
        assert np.all(x[:, 0] == y[0, :])


# --- defects ---


class TestDefects:
    def test_concave_function_passes(self):
        xs = geometric_grid(1e-3, 1e3, per_decade=16)
        assert concavity_defect(xs, np.log1p(xs)) <= 0

    def test_convex_function_fails(self):
        xs = np.linspace(0.0, 10.0, 50)
        assert concavity_defect(xs, xs**2) > 0

    def test_monotone(self):
        values = np.array([0.0, 1.0, 1.0, 2.0])
        assert nondecreasing_defect(values) <= 0
        assert nonincreasing_defect(values) > 0

    def test_short_inputs(self):
        assert nondecreasing_defect(np.array([1.0])) == 0.0
        assert concavity_defect(np.array([0.0, 1.0]), np.array([0.0, 1.0])) == 0.0

    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=2, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_sorted_values_are_nondecreasing(self, values):
        assert nondecreasing_defect(np.sort(np.array(values))) <= 0

    @given(
        st.floats(min_value=0.01, max_value=100.0),
        st.floats(min_value=0.0, max_value=10.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_linear_functions_are_concave(self, slope, intercept):
        xs = geometric_grid(1e-2, 1e2, per_decade=8)
        assert concavity_defect(xs, slope * xs + intercept) <= 0

    @given(st.floats(min_value=0.1, max_value=10.0))
    @settings(max_examples=50, deadline=None)
    def test_log_is_subadditive_after_shift(self, c):
        x, y = pair_grid(1e-2, 1e2, per_decade=4)
        f = lambda v: np.log1p(v / c)  # noqa: E731
        assert np.all(f(x + y) <= f(x) + f(y) + 1e-12)
