"""Moment criteria and tail inequalities built on the simulation engines."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from models import BFunctionSpec, EstimateReport, Policy
from services.brw_service import forest_trajectories, maximal_W
from services.errors import PopulationExplosion, UndefinedJ0
from services.law_service import (
    AEvaluator,
    ConstLaw,
    LogParetoQLaw,
    MQLaw,
    RegimeReport,
    a_evaluator,
    classify_regime,
    draw,
)
from services.perpetuity_service import (
    ladder_decompose,
    pair_symmetrization,
    sample_log_zinf,
    sample_sigma_x,
    sample_zinf,
)
from services.point_process_service import (
    PointProcessLaw,
    SizeBiasedParetoLaw,
    _weights,
    induced_M_law,
    induced_M_sample,
    induced_m_evaluator,
)
from services.rvkit_service import eval_b, make_surrogate, select_c
from services.stats_service import (
    GROWTH_SCHEDULE,
    MIN_HITS,
    GrowthReport,
    InequalityPoint,
    InequalityReport,
    RunningMoments,
    TailCurve,
    inequality_check,
    moment_growth_diagnostic,
    report_from_moments,
    tail_curve,
    within,
)

logger = logging.getLogger("perpetua.criteria_service")

SYMM_BLOCKS = 64
SYMM_GRID_POINTS = 16
TAILIN_CANDIDATES = tuple(2.0**-j for j in range(0, 11))
TAILSUP_A = 0.5
TAILSUP_T = (1.0, 8.0)
ER5001_X = (0.5, 0.1, 0.01)
DUAL_HORIZON = 4096
Sampler = Callable[[np.random.Generator, int], np.ndarray]


def _log_plus(values: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(np.abs(values)), 0.0)


def _report(values, policy: Policy, seed: int, law_id: str, tag: str) -> EstimateReport:
    return report_from_moments(RunningMoments.of(values), policy.confidence, seed, law_id, tag)


# --- Perpetuity moments ---


def perpetuity_moment_sampler(law: MQLaw, spec: BFunctionSpec, policy: Policy = Policy()) -> Sampler:
    """Draws of b(log+|Z_inf|); heavy log-Pareto Q laws are summed in log space."""
    if isinstance(law, LogParetoQLaw):
        return lambda rng, size: eval_b(spec, np.maximum(sample_log_zinf(law, rng, size), 0.0))
    return lambda rng, size: eval_b(spec, _log_plus(sample_zinf(law, rng, size, policy)))


def perpetuity_condition_sampler(law: MQLaw, spec: BFunctionSpec, evaluator: Optional[AEvaluator] = None) -> Sampler:
    """Draws of b(log+|Q|) J(log+|Q|), the integrand of the moment criterion."""
    evaluator = evaluator or a_evaluator(law)

    def sampler(rng, size):
        if isinstance(law, LogParetoQLaw):
            level = law.draw_log_q(rng, size)
        else:
            level = _log_plus(law.sample_q(rng, size))
        return eval_b(spec, level) * evaluator.J(level)

    return sampler


@dataclass
class MomentCriterionReport:
    moment: GrowthReport
    condition: GrowthReport
    regime: Optional[RegimeReport] = None

    @property
    def agree(self) -> bool:
        verdicts = {self.moment.verdict, self.condition.verdict}
        return "inconclusive" not in verdicts and len(verdicts) == 1


def perpetuity_moment_criterion(
    law: MQLaw,
    spec: BFunctionSpec,
    rng: np.random.Generator,
    policy: Policy = Policy(),
    schedule: tuple[int, ...] = GROWTH_SCHEDULE,
) -> MomentCriterionReport:
    moment = moment_growth_diagnostic(perpetuity_moment_sampler(law, spec, policy), rng, schedule)
    condition = moment_growth_diagnostic(perpetuity_condition_sampler(law, spec), rng, schedule)
    regime = classify_regime(law, budget=1 << 16, rng=rng)
    logger.info(f"{law.id} {spec.text()}: moment {moment.verdict}, condition {condition.verdict}")
    return MomentCriterionReport(moment, condition, regime)


# --- Size-biased moments of W_1 ---


def induced_law_of(pp: PointProcessLaw, rng: Optional[np.random.Generator] = None) -> MQLaw:
    if pp.is_enumerable():
        return induced_M_law(pp)
    constant = pp.constant_displacement()
    if constant is not None:
        return ConstLaw(math.exp(pp.gamma * constant) / pp.m_gamma, 1.0)
    raise ValueError(f"{pp.id} has no exact induced law.")


def size_biased_log_w1(pp: PointProcessLaw, rng: np.random.Generator, size: int) -> np.ndarray:
    """log W^_1 under the size-biased law."""
    if isinstance(pp, SizeBiasedParetoLaw):
        return pp.sample_log_w1_hat(rng, size)
    weighted, _ = _weights(pp)
    qs = np.array([math.fsum(w) for w, _ in weighted])
    probs = np.array([p for _, p in weighted]) * qs
    keep = probs > 0
    picks = rng.choice(int(keep.sum()), size=size, p=probs[keep] / probs[keep].sum())
    return np.log(qs[keep][picks])


def size_biased_moment_sampler(
    pp: PointProcessLaw,
    spec: Optional[BFunctionSpec],
    evaluator: Optional[AEvaluator] = None,
) -> Sampler:
    """Draws of b(log+ W^_1) J(log+ W^_1); E of these equals E W_1 b(log+ W_1) J(log+ W_1)."""
    evaluator = evaluator or induced_m_evaluator(pp)

    def sampler(rng, size):
        level = np.maximum(size_biased_log_w1(pp, rng, size), 0.0)
        weight = eval_b(spec, level) if spec is not None else 1.0
        return weight * evaluator.J(level)

    return sampler


# --- Uniform integrability of W_n ---


@dataclass
class UIReport:
    mean_w: Optional[EstimateReport]
    horizon: int
    pi_to_zero: bool
    j_moment: GrowthReport
    explosion: Optional[str] = None
    evidence: dict = field(default_factory=dict)

    @property
    def predicted_ui(self) -> bool:
        return self.pi_to_zero and self.j_moment.verdict == "converging"

    @property
    def mean_one(self) -> Optional[bool]:
        return None if self.mean_w is None else within(self.mean_w, 1.0)

    @property
    def agree(self) -> Optional[bool]:
        if self.mean_w is None or self.j_moment.verdict == "inconclusive":
            return None
        return bool(self.mean_one) if self.predicted_ui else True


def uniform_integrability_check(
    pp: PointProcessLaw,
    reps: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
    horizon: Optional[int] = None,
    schedule: tuple[int, ...] = GROWTH_SCHEDULE,
    seed: int = 0,
) -> UIReport:
    """Three signals: E W_n near 1, Pi_n -> 0 for the induced walk, and the J-moment of W_1."""
    horizon = min(horizon or policy.gen_cap, policy.gen_cap)
    evidence: dict = {}
    try:
        induced = induced_law_of(pp)
        regime = classify_regime(induced, budget=1 << 16, rng=rng)
        pi_to_zero = regime.case != "divergent"
        evaluator = a_evaluator(induced)
        evidence["regime"] = regime.case
    except ValueError:
        sample = induced_M_sample(pp, rng)
        pi_to_zero = sample.mean_log() < 0
        evaluator = sample.a_evaluator()
        evidence["mean_log_m"] = sample.mean_log()
    try:
        j_moment = moment_growth_diagnostic(size_biased_moment_sampler(pp, None, evaluator), rng, schedule)
    except UndefinedJ0:
        j_moment = GrowthReport("diverging", list(schedule), [], [])
    mean_w, explosion = None, None
    try:
        w = forest_trajectories(pp, horizon, reps, rng, policy)[:, -1]
        mean_w = _report(w, policy, seed, pp.id, f"ui:W_{horizon}")
    except PopulationExplosion as exc:
        explosion = exc.message
        logger.warning(f"{pp.id}: E W_{horizon} unavailable ({exc.message})")
    report = UIReport(mean_w, horizon, pi_to_zero, j_moment, explosion, evidence)
    logger.info(f"{pp.id}: UI predicted={report.predicted_ui}, J-moment {j_moment.verdict}")
    return report


# --- Tail inequalities ---


def symmetrized_sup(law: MQLaw, rng: np.random.Generator, reps: int, blocks: int = SYMM_BLOCKS):
    """sup_k |Pi_{2k-2} Qbar_k^(2)| and sup_k |Pi_{2k}| per replicate."""
    draws = pair_symmetrization(law, rng, reps * blocks)
    pi2 = draws.pi2.reshape(reps, blocks)
    qbar = draws.qbar.reshape(reps, blocks)
    with np.errstate(over="ignore", under="ignore"):
        products = np.cumprod(np.abs(pi2), axis=1)
        before = np.concatenate((np.ones((reps, 1)), products[:, :-1]), axis=1)
        sup_terms = np.max(before * np.abs(qbar), axis=1)
        sup_even = np.maximum(1.0, np.max(products, axis=1))
    return sup_terms, sup_even, draws.degenerate


def _grid_between(lo: float, hi: float, points: int = SYMM_GRID_POINTS) -> np.ndarray:
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo or lo <= 0:
        raise ValueError(f"Cannot build a grid on [{lo:g}, {hi:g}].")
    return np.geomspace(lo, hi, points)


def symm_check(
    law: MQLaw,
    reps: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
) -> InequalityReport:
    """P{sup_k |Pi_{2k-2} Qbar_k^(2)| > x} <= 4 P{|Z_inf| > x/2}."""
    sups, _, degenerate = symmetrized_sup(law, rng, reps)
    z = np.abs(sample_zinf(law, rng, reps, policy))
    top = 2.0 * float(np.quantile(z, 0.99))
    grid = _grid_between(top / 100.0, top)
    lhs = tail_curve(sups, grid, policy.confidence)
    rhs = _relabel(tail_curve(z, grid / 2.0, policy.confidence), grid)
    if degenerate:
        logger.warning(f"{law.id}: symmetrized sums are degenerate; the left side is identically 0")
    return inequality_check(lhs, rhs, constant=4.0)


def _relabel(curve: TailCurve, grid: np.ndarray) -> TailCurve:
    """The same survival estimates indexed by a different grid."""
    points = [p.model_copy(update={"t": float(t)}) for p, t in zip(curve.points, grid)]
    return TailCurve(points, curve.n, list(curve.hits))


@dataclass
class TailinReport:
    best_c: float
    report: Optional[InequalityReport]
    degenerate: bool

    @property
    def passed(self) -> bool:
        return not math.isnan(self.best_c) and self.report is not None and self.report.passed


def tailin_check(law: MQLaw, reps: int, rng: np.random.Generator, policy: Policy = Policy()) -> TailinReport:
    """P{sup_k |Pi_{2k}| > x} <= 2 P{sup_k |Pi_{2k-2} Qbar_k^(2)| > c x} for the best empirical c."""
    sups, sup_even, degenerate = symmetrized_sup(law, rng, reps)
    if degenerate:
        return TailinReport(math.nan, None, True)
    top = float(np.quantile(sup_even, 0.99))
    grid = _grid_between(0.5, max(top, 1.0) * 2.0)
    lhs = tail_curve(sup_even, grid, policy.confidence)
    for c in TAILIN_CANDIDATES:
        rhs = _relabel(tail_curve(sups, c * grid, policy.confidence), grid)
        holds = all(
            left.estimate <= 2.0 * right.estimate
            for left, right, k in zip(lhs.points, rhs.points, lhs.hits)
            if k >= MIN_HITS
        )
        if holds:
            return TailinReport(c, inequality_check(lhs, rhs, mode="existential"), False)
    return TailinReport(math.nan, None, False)


def tailsup_check(
    pp: PointProcessLaw,
    reps: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
    horizon: int = 10,
    a: float = TAILSUP_A,
) -> InequalityReport:
    """P{W* > t} <= b P{W > a t} over t in [1, 8], with W and W* taken at the horizon."""
    trajectories = forest_trajectories(pp, min(horizon, policy.gen_cap), reps, rng, policy)
    w_star = maximal_W(trajectories)
    grid = _grid_between(*TAILSUP_T)
    lhs = tail_curve(w_star, grid, policy.confidence)
    rhs = _relabel(tail_curve(trajectories[:, -1], a * grid, policy.confidence), grid)
    return inequality_check(lhs, rhs, mode="existential")


def er5001_check(
    law: MQLaw,
    reps: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
    xs: tuple[float, ...] = ER5001_X,
    seed: int = 0,
) -> InequalityReport:
    """Upper confidence bound of E sigma(x) against 2 J(|log x|)."""
    evaluator = a_evaluator(law)
    points = []
    for x in xs:
        sigma = sample_sigma_x(law, x, reps, rng, policy.nmax)
        estimate = _report(sigma, policy, seed, law.id, f"er5001:x={x:g}")
        bound = 2.0 * float(evaluator.J(abs(math.log(x))))
        upper = estimate.ci[1]
        points.append(InequalityPoint(x, upper, bound, bound, upper <= bound, estimate.estimate / bound))
    return InequalityReport("fixed", 2.0, 0.0, points, checked=len(points))


INEQUALITY_CHECKS = {
    "symm": symm_check,
    "tailin": tailin_check,
    "tailsup": tailsup_check,
    "er5001": er5001_check,
}
POINT_PROCESS_INEQUALITIES = frozenset({"tailsup"})


# --- Dual ladder epoch ---


@dataclass
class DualLadderReport:
    pi_at_sigma_star: EstimateReport
    reached: float
    ladder_ratio: EstimateReport
    ladder_qhat: EstimateReport
    sup_pi: EstimateReport
    c: float


def dual_ladder_moments(
    law: MQLaw,
    spec: BFunctionSpec,
    reps: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
    horizon: int = DUAL_HORIZON,
    seed: int = 0,
) -> DualLadderReport:
    """E f(|Pi_sigma*|) 1{sigma* < inf}, the ladder-block moments and E f(sup Pi_n).

    sigma* is followed up to `horizon` steps; paths that have not crossed 1 by then count as sigma* = inf.
    """
    c = select_c(spec)
    f = make_surrogate(spec, c, "f", certify=False)
    m, _ = draw(law, rng, reps * horizon)
    with np.errstate(over="ignore", under="ignore"):
        log_pi = np.cumsum(np.log(np.abs(m.reshape(reps, horizon))), axis=1)
    crossed = log_pi > 0.0
    reached = crossed.any(axis=1)
    first = np.argmax(crossed, axis=1)
    with np.errstate(over="ignore"):
        at_star = np.where(reached, np.exp(log_pi[np.arange(reps), first]), 0.0)
        sup_pi = np.exp(np.maximum(np.max(log_pi, axis=1), 0.0))
    blocks = ladder_decompose(law, reps, rng, policy.nmax)
    mhat = np.array(blocks.mhat)
    ratio = np.array(blocks.qtilde) / mhat
    tag = f"dual:{spec.text()}"
    return DualLadderReport(
        pi_at_sigma_star=_report(np.where(reached, f.value(at_star), 0.0), policy, seed, law.id, tag + ":pi_star"),
        reached=float(reached.mean()),
        ladder_ratio=_report(f.value(ratio), policy, seed, law.id, tag + ":qtilde_over_mhat"),
        ladder_qhat=_report(f.value(np.abs(np.array(blocks.qhat))), policy, seed, law.id, tag + ":qhat"),
        sup_pi=_report(f.value(sup_pi), policy, seed, law.id, tag + ":sup_pi"),
        c=c,
    )
