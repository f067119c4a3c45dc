"""Fixed-seed check suites over the simulation services.

Each suite is a list of named checks. A check returns one CheckResult whose
`value` is the residual, distance or estimate that decided it. Budgets shrink
by PERPETUA_QUICK_FACTOR under --quick and when TESTING is set.
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from models import BFunctionSpec, Policy
from services.brw_service import check_fixpoint, exact_w_law, forest_trajectories
from services.criteria_service import (
    er5001_check,
    perpetuity_moment_criterion,
    symm_check,
    tailin_check,
    tailsup_check,
)
from services.errors import PerpetuaError
from services.law_service import a_evaluator, draw, parse_mq_law
from services.metrics_service import record_check
from services.perpetuity_service import choose_eta, ladder_decompose, sample_zinf, simulate_zinf, v_function_and_wald
from services.point_process_service import induced_M_law, parse_point_process
from services.rng_service import substream
from services.rvkit_service import (
    ConcaveSurrogate,
    PhiFunction,
    asymptotic_ratio,
    b_handle,
    certify_surrogate,
    check_regular_variation,
    make_surrogate,
    select_c,
    star_defect,
    subadditivity_defect,
    submultiplicative_report,
)
from services.spine_service import (
    FUNCTIONALS,
    gw12_second_moment,
    reciprocal_martingale_check,
    second_moment,
    simulate_what,
    size_biasing_check,
    spine_batch,
    verify_spine_identity,
)
from services.stats_service import (
    QUICK_GROWTH_SCHEDULE,
    RunningMoments,
    dp_exact_zn,
    ks_against_exact,
    report_from_moments,
    within,
)

logger = logging.getLogger("perpetua.verify")

VERIFY_SEED = 20_231
QUICK_FACTOR = int(os.getenv("PERPETUA_QUICK_FACTOR", "10"))
_testing = os.getenv("TESTING", "").lower() in ("1", "true")

GW12 = "gw:nmin=1,nmax=2,p=0.5,x=0,gamma=1"
BINARY = "binary:gamma=1"
HALF = "const:m=0.5,q=1"
UNIFORM = "uniform:q=1"
TWOPOINT = "twopoint:m1=2,p1=0.5,m2=0.125,q=1"
LOGPARETO_FINITE = "logpareto_q:m=0.5,beta=2.5"
LOGPARETO_INFINITE = "logpareto_q:m=0.5,beta=1.5"
VERIFY_GROWTH_SCHEDULE = tuple(2**k for k in range(12, 21))
HALF_Q12 = "finite:m=0.5/0.5,q=1/2,p=0.5/0.5"
POWER1 = BFunctionSpec.parse("power:alpha=1")


@dataclass
class CheckResult:
    suite: str
    check: str
    passed: bool
    value: Optional[float] = None
    detail: str = ""


@dataclass
class Budget:
    quick: bool = False

    def reps(self, full: int) -> int:
        if self.quick or _testing:
            return max(full // QUICK_FACTOR, 100)
        return full

    def growth_schedule(self) -> tuple[int, ...]:
        return QUICK_GROWTH_SCHEDULE if self.quick or _testing else VERIFY_GROWTH_SCHEDULE


Check = Callable[[Budget, np.random.Generator], CheckResult]


def _sigma_report(values, tag: str):
    return report_from_moments(RunningMoments.of(values), 0.99, VERIFY_SEED, "", tag)


# --- rvkit ---


def check_f_surrogate(budget, rng):
    certificate = certify_surrogate(ConcaveSurrogate("f", POWER1, math.e))
    return CheckResult(
        "rvkit", "f-surrogate at c=e", certificate.passed, certificate.worst,
        f"f'(0)={certificate.right_derivative:.4f}",
    )


def check_select_c(budget, rng):
    c = select_c(POWER1)
    return CheckResult("rvkit", "select_c(power, alpha=1)", abs(c - 4 * math.e) < 1e-12, c)


def check_select_c_families(budget, rng):
    worst = -math.inf
    for text in ("power:alpha=2", "powerlog:alpha=1,k=1", "powerexp:alpha=0.5,beta=0.5,gamma=0.5"):
        spec = BFunctionSpec.parse(text)
        c = select_c(spec)
        for kind in ("f", "g"):
            worst = max(worst, certify_surrogate(ConcaveSurrogate(kind, spec, c)).worst)
    return CheckResult("rvkit", "select_c certifies every family", worst <= 0, worst)


def check_regular_variation_suite(budget, rng):
    phi = PhiFunction(make_surrogate(POWER1, select_c(POWER1), "g"), a_evaluator(parse_mq_law(HALF)))
    powerlog = BFunctionSpec.parse("powerlog:alpha=1,k=1")
    reports = [
        check_regular_variation(b_handle(BFunctionSpec.parse("power:alpha=2")), 3.0, index=2.0),
        check_regular_variation(make_surrogate(powerlog, select_c(powerlog), "f"), 10.0),
        check_regular_variation(phi, 2.0),
    ]
    worst = max(r.tail_worst for r in reports)
    return CheckResult("rvkit", "regular variation of b, f and phi", all(r.passed for r in reports), worst)


def check_subadditivity(budget, rng):
    f = make_surrogate(POWER1, select_c(POWER1), "f")
    phi = PhiFunction(make_surrogate(POWER1, select_c(POWER1), "g"), a_evaluator(parse_mq_law(HALF)))
    defects = (subadditivity_defect(f), subadditivity_defect(phi), star_defect(phi))
    submult = submultiplicative_report(f)
    return CheckResult(
        "rvkit", "subadditivity and star inequality", max(defects) <= 0 and submult.stable, max(defects),
        f"C={submult.fine:.4g}",
    )


def check_asymptotic_ratio(budget, rng):
    ratio = asymptotic_ratio(make_surrogate(POWER1, select_c(POWER1), "f"))
    return CheckResult("rvkit", "b(log x)/f(x) -> 1", ratio <= 0.05, ratio)


# --- perpetuity ---


def check_geometric_fixed_point(budget, rng):
    result = simulate_zinf(parse_mq_law(HALF), Policy(), rng)
    law, _ = dp_exact_zn(parse_mq_law(HALF), 3)
    passed = abs(result.value - 2.0) <= 1e-9 and law.size == 1 and abs(law.values[0] - 1.75) <= 1e-12
    return CheckResult("perpetuity", "geometric perpetuity", passed, result.value, f"Z_3={law.values[0]:g}")


def check_mean_law(budget, rng):
    reps = budget.reps(100_000)
    gw_law = induced_M_law(parse_point_process(GW12))
    worst = 0.0
    passed = True
    for law, target in ((parse_mq_law(UNIFORM), 2.0), (gw_law, 10.0 / 3.0)):
        report = _sigma_report(sample_zinf(law, rng, reps, Policy()), law.id)
        passed &= within(report, target)
        worst = max(worst, abs(report.estimate - target) / max(report.stderr, 1e-300))
    return CheckResult("perpetuity", "E Z = E Q / (1 - E M)", passed, worst, "max |z|-score")


def sample_zn(law, n: int, reps: int, rng: np.random.Generator) -> np.ndarray:
    """Z_n for `reps` independent paths."""
    m, q = draw(law, rng, reps * n)
    m, q = m.reshape(reps, n), q.reshape(reps, n)
    pi = np.cumprod(np.column_stack((np.ones(reps), m[:, :-1])), axis=1)
    return np.sum(pi * q, axis=1)


def check_exact_oracle(budget, rng):
    law = parse_mq_law(TWOPOINT)
    reps = budget.reps(100_000)
    worst = 0.0
    passed = True
    for n in range(1, 7):
        exact, _ = dp_exact_zn(law, n)
        ks = ks_against_exact(sample_zn(law, n, reps, rng), exact)
        passed &= ks.passed
        worst = max(worst, ks.distance / ks.critical)
    return CheckResult("perpetuity", "KS against exact Z_n, n <= 6", passed, worst, "max distance/critical")


def check_wald(budget, rng):
    reps = budget.reps(100_000)
    worst = 0.0
    passed = True
    for text in (UNIFORM, HALF):
        law = parse_mq_law(text)
        eta, alpha = choose_eta(law, rng)
        for x in (1.0, 2.0, 4.0):
            report = v_function_and_wald(law, eta, x, reps, rng, Policy(), alpha, seed=VERIFY_SEED)
            passed &= report.passed
            worst = max(worst, report.residual_value)
    return CheckResult("perpetuity", "Wald identity on the capped walk", passed, worst)


# --- ladder ---


def check_ladder_bound(budget, rng):
    reps = budget.reps(100_000)
    reports = [er5001_check(parse_mq_law(text), reps, rng, seed=VERIFY_SEED) for text in (UNIFORM, HALF)]
    return CheckResult(
        "ladder", "E sigma(x) <= 2 J(|log x|)", all(r.passed for r in reports), max(r.max_ratio for r in reports)
    )


def check_ladder_reconstruction(budget, rng):
    worst = 0.0
    for text in (UNIFORM, TWOPOINT):
        blocks = ladder_decompose(parse_mq_law(text), budget.reps(4096), rng)
        gap = abs(blocks.reconstruct() - blocks.z_completed) / (1.0 + abs(blocks.z_completed))
        worst = max(worst, gap)
    return CheckResult("ladder", "ladder blocks rebuild Z", worst <= 1e-10, worst)


# --- brw ---


def check_martingale_mean(budget, rng):
    trajectories = forest_trajectories(parse_point_process(GW12), 10, budget.reps(10_000), rng)
    passed = True
    worst = 0.0
    for n in range(1, 11):
        report = _sigma_report(trajectories[:, n], f"W_{n}")
        passed &= within(report, 1.0)
        worst = max(worst, abs(report.estimate - 1.0))
    return CheckResult("brw", "E W_n = 1, n <= 10", passed, worst)


def check_binary_exact(budget, rng):
    trajectories = forest_trajectories(parse_point_process(BINARY), 10, 256, rng)
    degenerate = all(exact_w_law(parse_point_process(BINARY), n).size == 1 for n in range(1, 5))
    return CheckResult("brw", "binary W_n == 1", bool(np.all(trajectories == 1.0)) and degenerate, None)


def check_fixpoint_exact(budget, rng):
    report = check_fixpoint(parse_point_process(GW12), 1, 1, rng, budget.reps(10_000))
    return CheckResult("brw", "W_2 = sum L(v) W_1(v)", report.passed, report.distance)


def check_second_moment_exact(budget, rng):
    value = second_moment(parse_point_process(GW12), 1)
    return CheckResult("brw", "E W_1^2 = 10/9", abs(value - 10.0 / 9.0) <= 1e-12, value)


# --- spine ---


def check_spine_identity(budget, rng):
    worst = 0.0
    for text in (GW12, BINARY):
        batch = spine_batch(parse_point_process(text), 6, budget.reps(10_000), rng)
        residual, _ = batch.residuals()
        worst = max(worst, float(np.max(residual / (1.0 + batch.what()))))
    return CheckResult("spine", "closed-form spine identity", worst <= 1e-10, worst)


def check_spine_paper_form(budget, rng):
    residuals = verify_spine_identity(simulate_what(parse_point_process(BINARY), 3, rng))
    passed = residuals.passed and residuals.what == 1.0 and abs(residuals.paper_value - 2.75) <= 1e-12
    return CheckResult(
        "spine", "deterministic binary spine, n=3", passed, residuals.paper_form,
        f"decomposition from 1: {residuals.paper_value:g} vs W^_3={residuals.what:g}",
    )


def check_spine_second_moment(budget, rng):
    pp = parse_point_process(GW12)
    batch = spine_batch(pp, 6, budget.reps(100_000), rng)
    trajectory = batch.what_trajectory()
    passed = abs(second_moment(pp, 2) - gw12_second_moment(2)) <= 1e-12
    worst = 0.0
    for n in range(1, 7):
        report = _sigma_report(trajectory[:, n], f"what_{n}")
        passed &= within(report, gw12_second_moment(n))
        worst = max(worst, abs(report.estimate - gw12_second_moment(n)))
    return CheckResult("spine", "E W^_n = E W_n^2", passed, worst)


def check_rejection_spine(budget, rng):
    batch = spine_batch(parse_point_process(GW12), 4, budget.reps(100_000), rng, mode="rejection")
    report = _sigma_report(batch.what(), "what_4")
    target = gw12_second_moment(4)
    return CheckResult("spine", "rejection-tilted spine, E W^_4", within(report, target), abs(report.estimate - target))


def check_size_biasing(budget, rng):
    pp = parse_point_process(GW12)
    reports = [
        size_biasing_check(pp, n, FUNCTIONALS[name], budget.reps(100_000), rng, seed=VERIFY_SEED)
        for n in (1, 2)
        for name in ("identity", "log1p")
    ]
    worst = max(abs(r.difference) / max(r.sigma, 1e-300) for r in reports)
    return CheckResult("spine", "W^_n is W_n size-biased", all(r.passed for r in reports), worst, "max |z|-score")


def check_reciprocal(budget, rng):
    report = reciprocal_martingale_check(parse_point_process(GW12), 5, budget.reps(10_000), rng, seed=VERIFY_SEED)
    return CheckResult("spine", "E 1/W^_n = P(W_n > 0)", report.passed, report.exact_first)


# --- inequalities ---


def check_moment_boundary(budget, rng):
    schedule = budget.growth_schedule()
    finite = perpetuity_moment_criterion(parse_mq_law(LOGPARETO_FINITE), POWER1, rng, schedule=schedule)
    infinite = perpetuity_moment_criterion(parse_mq_law(LOGPARETO_INFINITE), POWER1, rng, schedule=schedule)
    passed = finite.moment.verdict == "converging" and infinite.moment.verdict == "diverging"
    return CheckResult(
        "inequalities", "E log+ Z_inf, log-Pareto Q, beta 2.5 vs 1.5", passed, finite.moment.ratios[-1],
        f"moment {finite.moment.verdict}/{infinite.moment.verdict}, "
        f"condition {finite.condition.verdict}/{infinite.condition.verdict}",
    )


def check_symm(budget, rng):
    report = symm_check(parse_mq_law(HALF_Q12), budget.reps(100_000), rng)
    return CheckResult("inequalities", "symmetrized sup, constant 4", report.passed, report.max_ratio)


def check_tailsup(budget, rng):
    report = tailsup_check(parse_point_process(GW12), budget.reps(10_000), rng)
    return CheckResult("inequalities", "sup W_n tail, a=1/2", report.passed, report.max_ratio)


def check_tailin(budget, rng):
    report = tailin_check(parse_mq_law(HALF_Q12), budget.reps(100_000), rng)
    return CheckResult("inequalities", "tail of the perpetuity, best c", report.passed, report.best_c)


SUITES: dict[str, list[Check]] = {
    "rvkit": [
        check_f_surrogate,
        check_select_c,
        check_select_c_families,
        check_regular_variation_suite,
        check_subadditivity,
        check_asymptotic_ratio,
    ],
    "perpetuity": [check_geometric_fixed_point, check_mean_law, check_exact_oracle, check_wald],
    "ladder": [check_ladder_bound, check_ladder_reconstruction],
    "brw": [check_martingale_mean, check_binary_exact, check_fixpoint_exact, check_second_moment_exact],
    "spine": [
        check_spine_identity,
        check_spine_paper_form,
        check_spine_second_moment,
        check_rejection_spine,
        check_size_biasing,
        check_reciprocal,
    ],
    "inequalities": [check_symm, check_tailsup, check_tailin, check_moment_boundary],
}
SUITE_NAMES = (*SUITES, "all")


def run_check(suite: str, check: Check, budget: Budget) -> CheckResult:
    rng = substream(VERIFY_SEED, suite, check.__name__)
    try:
        result = check(budget, rng)
    except PerpetuaError as exc:
        logger.error(f"{suite}/{check.__name__}: {exc.code}: {exc.message}")
        result = CheckResult(suite, check.__name__, False, None, f"{exc.code}: {exc.message}")
    record_check(suite, result.passed)
    logger.debug(f"{suite}: {result.check} -> {'pass' if result.passed else 'FAIL'}")
    return result


def run_suite(name: str, quick: bool = False) -> list[CheckResult]:
    if name not in SUITE_NAMES:
        raise ValueError(f"Unknown suite '{name}'. Choose one of {', '.join(SUITE_NAMES)}.")
    budget = Budget(quick)
    names = list(SUITES) if name == "all" else [name]
    results = [run_check(suite, check, budget) for suite in names for check in SUITES[suite]]
    failed = sum(1 for r in results if not r.passed)
    logger.info(f"verify {name}: {len(results) - failed}/{len(results)} checks passed")
    return results
