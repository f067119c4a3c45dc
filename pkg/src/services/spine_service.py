import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np

from models import EstimateReport, Policy
from services.brw_service import exact_w_law, forest_trajectories
from services.errors import NotEnumerable, UnsupportedTilting
from services.point_process_service import (
    OffspringBatch,
    PointProcessLaw,
    _weights,
    tilted_reproduction_law,
)
from services.stats_service import (
    RunningMoments,
    agrees,
    combined_difference,
    report_from_moments,
)

logger = logging.getLogger("perpetua.spine_service")

RESIDUAL_TOL = 1e-10
SpineMode = Literal["exact", "rejection", "importance"]


def _spine_proposal(pp: PointProcessLaw, mode: SpineMode) -> PointProcessLaw:
    if mode == "importance":
        return pp
    if mode == "rejection":
        return tilted_reproduction_law(pp, "rejection")
    if not pp.is_enumerable():
        raise UnsupportedTilting(f"{pp.id} has no exact tilting; use importance mode.")
    try:
        return tilted_reproduction_law(pp, "exact")
    except NotEnumerable as exc:
        raise UnsupportedTilting(str(exc)) from exc


def _choose_children(batch: OffspringBatch, rng: np.random.Generator) -> np.ndarray:
    """Flat index of one child per parent, picked proportionally to its tilt; -1 for childless parents."""
    parents = batch.counts.size
    ends = np.cumsum(batch.counts)
    starts = ends - batch.counts
    cumulative = np.cumsum(batch.tilts)
    base = np.where(starts > 0, cumulative[np.maximum(starts - 1, 0)], 0.0) if batch.tilts.size else np.zeros(parents)
    totals = np.bincount(batch.parents, weights=batch.tilts, minlength=parents)
    targets = base + rng.random(parents) * totals
    picks = np.searchsorted(cumulative, targets, side="right") if batch.tilts.size else np.zeros(parents, dtype=int)
    picks = np.clip(picks, starts, np.maximum(ends - 1, starts))
    return np.where(batch.counts > 0, picks, -1)


@dataclass
class SpineStep:
    configuration: np.ndarray
    ratios: np.ndarray
    chosen: int
    M: float
    Q: float
    weight: float = 1.0


def _draw_step(pp: PointProcessLaw, proposal: PointProcessLaw, rng: np.random.Generator, mode: SpineMode) -> SpineStep:
    batch = proposal.sample_batch(rng, 1)
    chosen = int(_choose_children(batch, rng)[0])
    ratios = batch.tilts / pp.m_gamma
    q = math.fsum(ratios)
    if chosen < 0:
        return SpineStep(batch.displacements, ratios, -1, 1.0, 0.0, 0.0)
    weight = q if mode == "importance" else 1.0
    return SpineStep(batch.displacements, ratios, chosen, float(ratios[chosen]), q, weight)


def spine_step(pp: PointProcessLaw, rng: np.random.Generator, mode: SpineMode = "exact") -> SpineStep:
    return _draw_step(pp, _spine_proposal(pp, mode), rng, mode)


# --- Single paths ---


@dataclass
class SiblingRecord:
    logweight: float
    ratio: float
    subtree: float


@dataclass
class SpineRecord:
    m: float
    q: float
    logweight: float
    siblings: list[SiblingRecord] = field(default_factory=list)


@dataclass
class SpinePath:
    records: list[SpineRecord]
    n: int
    what: float
    law_id: str = ""

    @property
    def pi(self) -> list[float]:
        values = [1.0]
        for record in self.records:
            values.append(values[-1] * record.m)
        return values

    def remainders(self) -> list[float]:
        """R_{n,k} = sum over siblings of (L(u)/L(v_{k-1}))(W_{n-k}(u) - 1)."""
        return [math.fsum(s.ratio * (s.subtree - 1.0) for s in record.siblings) for record in self.records]

    def summary(self) -> dict:
        residuals = verify_spine_identity(self)
        return {
            "n": self.n,
            "what": self.what,
            "pi_n": self.pi[-1],
            "q": [r.q for r in self.records],
            "m": [r.m for r in self.records],
            "resid_decomp": residuals.decomposition,
            "resid_closed": residuals.closed_form,
            "resid_paper": residuals.paper_form,
        }


def _decomposition_terms(path: SpinePath) -> list[float]:
    pi = path.pi
    terms = [pi[-1]]
    for k, record in enumerate(path.records, start=1):
        terms.extend(pi[k - 1] * s.ratio * s.subtree for s in record.siblings)
    return terms


def simulate_what(
    pp: PointProcessLaw,
    n: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
) -> SpinePath:
    """One spine of length n; every sibling roots an unmodified BRW run to the remaining depth."""
    if n > policy.gen_cap:
        raise ValueError(f"n={n} exceeds gen_cap={policy.gen_cap}.")
    proposal = _spine_proposal(pp, "exact")
    records: list[SpineRecord] = []
    logweight = 0.0
    for k in range(1, n + 1):
        step = _draw_step(pp, proposal, rng, "exact")
        siblings = np.delete(step.ratios, step.chosen)
        depth = n - k
        subtree = forest_trajectories(pp, depth, siblings.size, rng, policy)[:, -1] if siblings.size else np.empty(0)
        sibling_records = [SiblingRecord(logweight + math.log(r), float(r), float(w)) for r, w in zip(siblings, subtree)]
        logweight += math.log(step.M)
        records.append(SpineRecord(step.M, step.Q, logweight, sibling_records))
    path = SpinePath(records, n, 0.0, pp.id)
    path.what = math.fsum(_decomposition_terms(path))
    return path


@dataclass
class SpineResiduals:
    decomposition: float
    closed_form: float
    paper_form: float
    paper_value: float
    what: float

    @property
    def passed(self) -> bool:
        bound = RESIDUAL_TOL * (1.0 + abs(self.what))
        return self.decomposition <= bound and self.closed_form <= bound


def verify_spine_identity(path: SpinePath) -> SpineResiduals:
    pi = path.pi
    remainders = path.remainders()
    decomposition = abs(path.what - math.fsum(_decomposition_terms(path)))
    closed_terms = [pi[-1]]
    paper_terms = [1.0]
    for k, (record, remainder) in enumerate(zip(path.records, remainders), start=1):
        closed_terms.extend((pi[k - 1] * record.q, -pi[k], pi[k - 1] * remainder))
        paper_terms.append(pi[k - 1] * (record.q + remainder))
    paper_value = math.fsum(paper_terms)
    return SpineResiduals(
        decomposition=decomposition,
        closed_form=abs(path.what - math.fsum(closed_terms)),
        paper_form=abs(path.what - paper_value),
        paper_value=paper_value,
        what=path.what,
    )


# --- Vectorised spines over replicates ---


@dataclass
class SpineBatch:
    """Spine draws for many replicates.

    contributions[r, k-1, d] = sum over siblings u born at step k of (L(u)/L(v_{k-1})) W_d(u).
    """

    m: np.ndarray
    q: np.ndarray
    contributions: np.ndarray
    weights: np.ndarray

    @property
    def reps(self) -> int:
        return int(self.m.shape[0])

    @property
    def n(self) -> int:
        return int(self.m.shape[1])

    def pi(self) -> np.ndarray:
        return np.concatenate((np.ones((self.reps, 1)), np.cumprod(self.m, axis=1)), axis=1)

    def what_trajectory(self) -> np.ndarray:
        """Columns W^_0..W^_n along each spine."""
        pi = self.pi()
        out = pi.copy()
        for j in range(1, self.n + 1):
            for k in range(1, j + 1):
                out[:, j] += pi[:, k - 1] * self.contributions[:, k - 1, j - k]
        return out

    def what(self) -> np.ndarray:
        return self.what_trajectory()[:, -1]

    def remainders(self) -> np.ndarray:
        n = self.n
        last = np.stack([self.contributions[:, k - 1, n - k] for k in range(1, n + 1)], axis=1) if n else self.m
        return last - (self.q - self.m)

    def z_majorant(self) -> np.ndarray:
        """sum_{k<=n} Pi_{k-1} Q_k."""
        return np.sum(self.pi()[:, :-1] * self.q, axis=1)

    def residuals(self) -> tuple[np.ndarray, np.ndarray]:
        """(closed-form residual, paper-form value) per replicate."""
        pi = self.pi()
        what = self.what()
        closed = pi[:, -1] + np.sum(pi[:, :-1] * self.q - pi[:, 1:], axis=1) + np.sum(pi[:, :-1] * self.remainders(), axis=1)
        shifted = 1.0 + np.sum(pi[:, :-1] * (self.q + self.remainders()), axis=1)
        return np.abs(what - closed), shifted


def spine_batch(
    pp: PointProcessLaw,
    n: int,
    reps: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
    mode: SpineMode = "exact",
) -> SpineBatch:
    if n > policy.gen_cap:
        raise ValueError(f"n={n} exceeds gen_cap={policy.gen_cap}.")
    proposal = _spine_proposal(pp, mode)
    m_gamma = pp.m_gamma
    ms = np.ones((reps, n))
    qs = np.zeros((reps, n))
    contributions = np.zeros((reps, n, n + 1))
    weights = np.ones(reps)
    for k in range(1, n + 1):
        batch = proposal.sample_batch(rng, reps)
        ratios = batch.tilts / m_gamma
        parents = batch.parents
        chosen = _choose_children(batch, rng)
        alive = chosen >= 0
        qs[:, k - 1] = np.bincount(parents, weights=ratios, minlength=reps)
        ms[alive, k - 1] = ratios[chosen[alive]]
        if mode == "importance":
            weights *= qs[:, k - 1]
        sibling = np.ones(ratios.size, dtype=bool)
        sibling[chosen[alive]] = False
        depth = n - k
        sib_parents = parents[sibling]
        sib_ratios = ratios[sibling]
        if sib_ratios.size:
            subtree = forest_trajectories(pp, depth, sib_ratios.size, rng, policy)
            for d in range(depth + 1):
                contributions[:, k - 1, d] = np.bincount(sib_parents, weights=sib_ratios * subtree[:, d], minlength=reps)
    logger.debug(f"spine_batch({pp.id}, n={n}, reps={reps}, mode={mode})")
    return SpineBatch(ms, qs, contributions, weights)


# --- Functionals and checks ---

Functional = Callable[[np.ndarray], np.ndarray]


def running_max_exceeds(t: float) -> Functional:
    return lambda traj: (np.max(traj, axis=1) > t).astype(float)


FUNCTIONALS: dict[str, Functional] = {
    "identity": lambda traj: traj[:, -1],
    "log1p": lambda traj: np.log1p(traj[:, -1]),
    "max-exceeds-1.5": running_max_exceeds(1.5),
}


def _report(values: np.ndarray, confidence: float, seed: int, law_id: str, tag: str) -> EstimateReport:
    return report_from_moments(RunningMoments.of(values), confidence, seed, law_id, tag)


@dataclass
class SizeBiasReport:
    lhs: EstimateReport
    rhs: EstimateReport
    exact: Optional[tuple[float, float]] = None

    @property
    def difference(self) -> float:
        return combined_difference(self.lhs, self.rhs)[0]

    @property
    def sigma(self) -> float:
        return combined_difference(self.lhs, self.rhs)[1]

    @property
    def passed(self) -> bool:
        exact_ok = self.exact is None or abs(self.exact[0] - self.exact[1]) <= 1e-12 * (1.0 + abs(self.exact[0]))
        return exact_ok and agrees(self.lhs, self.rhs)


def exact_size_biasing_one_step(pp: PointProcessLaw, h: Callable[[np.ndarray], np.ndarray]) -> tuple[float, float]:
    """(E W_1 h(W_1), E h(W^_1)) by enumeration; W^_1 = Q under the tilted configuration law."""
    w1 = exact_w_law(pp, 1)
    lhs = math.fsum(w1.probs * w1.values * h(w1.values))
    weighted, _ = _weights(pp)
    qs = np.array([math.fsum(w) for w, _ in weighted])
    tilted = np.array([p for _, p in weighted]) * qs
    keep = tilted > 0
    rhs = math.fsum(tilted[keep] * h(qs[keep]))
    return lhs, rhs


def size_biasing_check(
    pp: PointProcessLaw,
    n: int,
    h: Functional,
    reps: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
    confidence: float = 0.99,
    seed: int = 0,
    mode: SpineMode = "exact",
) -> SizeBiasReport:
    """E W_n h(W_0..W_n) against E h(W^_0..W^_n), from independent runs."""
    trajectories = forest_trajectories(pp, n, reps, rng, policy)
    lhs = _report(trajectories[:, -1] * h(trajectories), confidence, seed, pp.id, f"sizebias-lhs-n{n}")
    spines = spine_batch(pp, n, reps, rng, policy, mode)
    rhs = _report(spines.weights * h(spines.what_trajectory()), confidence, seed, pp.id, f"sizebias-rhs-n{n}")
    exact = None
    if n == 1 and pp.is_enumerable():
        exact = exact_size_biasing_one_step(pp, lambda x: h(np.column_stack((np.ones_like(x), x))))
    return SizeBiasReport(lhs, rhs, exact)


def survival_probability(pp: PointProcessLaw, n: int) -> float:
    """P{generation n is non-empty} by iterating the offspring generating function."""
    configs = pp.enumerate()
    if configs is None:
        raise NotEnumerable(f"{pp.id} has no finite enumeration.")
    sizes = np.array([len(c) for c, _ in configs], dtype=float)
    probs = np.array([p for _, p in configs])
    extinct = 0.0
    for _ in range(n):
        extinct = float(np.sum(probs * extinct**sizes))
    return 1.0 - extinct


@dataclass
class ReciprocalReport:
    estimates: list[EstimateReport]
    targets: list[float]
    exact_first: Optional[float] = None

    @property
    def passed(self) -> bool:
        exact_ok = self.exact_first is None or abs(self.exact_first - self.targets[0]) <= 1e-12
        return exact_ok and all(
            abs(r.estimate - t) <= 3.0 * r.stderr + 1e-12 for r, t in zip(self.estimates, self.targets)
        )


def _reciprocal(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0 / np.where(x > 0, x, 1.0), 0.0)


def reciprocal_martingale_check(
    pp: PointProcessLaw,
    n_max: int,
    reps: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
    confidence: float = 0.99,
    seed: int = 0,
) -> ReciprocalReport:
    """E[1/W^_n] per n; the target is P{W_n > 0}, which is 1 for laws without childless configurations."""
    spines = spine_batch(pp, n_max, reps, rng, policy)
    trajectory = spines.what_trajectory()
    estimates, targets = [], []
    for n in range(1, n_max + 1):
        estimates.append(_report(1.0 / trajectory[:, n], confidence, seed, pp.id, f"reciprocal-n{n}"))
        targets.append(survival_probability(pp, n))
    _, exact_first = exact_size_biasing_one_step(pp, _reciprocal)
    return ReciprocalReport(estimates, targets, exact_first)


def second_moment(pp: PointProcessLaw, n: int) -> float:
    """E W^_n = E W_n^2, exactly for enumerable laws."""
    return exact_w_law(pp, n).moment(np.square)


def gw12_second_moment(n: int) -> float:
    """E W_n^2 for N in {1, 2} equiprobable, X = 0, gamma = 1."""
    return 4.0 / 3.0 - (1.0 / 3.0) * (2.0 / 3.0) ** n


@dataclass
class LowerBoundReport:
    last_violations: int
    max_violations: int
    reps: int

    @property
    def passed(self) -> bool:
        return self.last_violations == 0 and self.max_violations == 0


def lower_bound_flags(batch: SpineBatch) -> tuple[np.ndarray, np.ndarray]:
    """Per path: W^_n >= Pi_{n-1} Q_n, and max_k W^_k >= max_k Pi_{k-1} Q_k."""
    if not batch.n:
        ok = np.ones(batch.reps, dtype=bool)
        return ok, ok
    pi = batch.pi()
    what = batch.what_trajectory()
    terms = pi[:, :-1] * batch.q
    slack = RESIDUAL_TOL * (1.0 + np.abs(what[:, -1]))
    last = what[:, -1] >= terms[:, -1] - slack
    running = np.max(what[:, 1:], axis=1) >= np.max(terms, axis=1) - slack
    return last, running


def lower_bound_check(batch: SpineBatch) -> LowerBoundReport:
    last, running = lower_bound_flags(batch)
    return LowerBoundReport(int(np.sum(~last)), int(np.sum(~running)), batch.reps)


@dataclass
class JensenReport:
    lhs: EstimateReport
    rhs: EstimateReport

    @property
    def passed(self) -> bool:
        gap = self.lhs.estimate - self.rhs.estimate
        return gap <= 3.0 * math.hypot(self.lhs.stderr, self.rhs.stderr) + 1e-12


def jensen_bound_check(
    batch: SpineBatch,
    f: Callable[[np.ndarray], np.ndarray],
    confidence: float = 0.99,
    seed: int = 0,
    law_id: str = "",
) -> JensenReport:
    """E f(W^_n) <= E f(sum_{k<=n} Pi_{k-1} Q_k) for concave nondecreasing f."""
    lhs = _report(f(batch.what()), confidence, seed, law_id, "jensen-lhs")
    rhs = _report(f(batch.z_majorant()), confidence, seed, law_id, "jensen-rhs")
    return JensenReport(lhs, rhs)


def remainder_means(batch: SpineBatch, confidence: float = 0.99, seed: int = 0, law_id: str = "") -> list[EstimateReport]:
    remainders = batch.remainders()
    return [_report(remainders[:, k], confidence, seed, law_id, f"remainder-k{k + 1}") for k in range(batch.n)]
