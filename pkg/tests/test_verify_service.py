import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import pytest

from formatters.verify_formatter import format_verify_table
from services.errors import Extinct
from services.stats_service import QUICK_GROWTH_SCHEDULE
from services.verify_service import (
    QUICK_FACTOR,
    SUITE_NAMES,
    SUITES,
    Budget,
    CheckResult,
    check_binary_exact,
    check_moment_boundary,
    check_rejection_spine,
    check_second_moment_exact,
    check_spine_paper_form,
    run_check,
    run_suite,
)


def make_result(passed: bool = True, value: float | None = 1.0) -> CheckResult:
    return CheckResult("brw", "E W_n = 1", passed, value, "")


# --- Budget ---


class TestBudget:
    def test_testing_shrinks(self):
        assert Budget().reps(100_000) == 100_000 // QUICK_FACTOR

    def test_floor(self):
        assert Budget(quick=True).reps(500) == 100

    def test_growth_schedule_shrinks(self):
        assert Budget(quick=True).growth_schedule() == QUICK_GROWTH_SCHEDULE


# --- run_check ---


class TestRunCheck:
    def test_deterministic_checks(self):
        budget = Budget(quick=True)
        assert run_check("brw", check_binary_exact, budget).passed
        assert run_check("brw", check_second_moment_exact, budget).value == pytest.approx(10.0 / 9.0)

    def test_spine_paper_form(self):
        result = run_check("spine", check_spine_paper_form, Budget(quick=True))
        assert result.passed
        assert "2.75" in result.detail

    def test_rejection_spine(self):
        result = run_check("spine", check_rejection_spine, Budget(quick=True))
        assert result.passed
        assert result.check == "rejection-tilted spine, E W^_4"

    def test_moment_boundary(self):
        result = run_check("inequalities", check_moment_boundary, Budget(quick=True))
        assert result.passed
        assert result.detail.startswith("moment converging/diverging")

    def test_error_becomes_failure(self):
        def check_dies(budget, rng):
            raise Extinct("population died out")

        result = run_check("brw", check_dies, Budget())
        assert not result.passed
        assert result.detail.startswith("extinct")


# --- run_suite ---


class TestRunSuite:
    def test_unknown_suite(self):
        with pytest.raises(ValueError):
            run_suite("nope")

    def test_suite_names(self):
        assert set(SUITE_NAMES) == {"rvkit", "perpetuity", "ladder", "brw", "spine", "inequalities", "all"}

    def test_rvkit_suite_passes(self):
        results = run_suite("rvkit", quick=True)
        assert len(results) == len(SUITES["rvkit"])
        assert all(r.passed for r in results)


# --- format_verify_table ---


class TestFormatVerifyTable:
    def test_summary_line(self):
        text = format_verify_table([make_result(), make_result(passed=False, value=None)])
        lines = text.splitlines()
        assert lines[0].startswith("suite")
        assert "FAIL" in lines[3]
        assert lines[-1] == "1/2 checks passed"

    def test_value_formatting(self):
        text = format_verify_table([make_result(value=0.123456789)])
        assert "0.123457" in text
