import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from models import Policy
from services.errors import Extinct, PopulationExplosion, SupportExplosion
from services.point_process_service import PointProcessLaw, _weights, require_supercritical
from services.stats_service import SUPPORT_CAP, ExactLaw, KSReport, ks_two_sample

logger = logging.getLogger("perpetua.brw_service")

EXACT_FIXPOINT_DEPTH = 3


@dataclass
class Generation:
    """One generation of a single tree: L(v) kept both as log and as a linear product."""

    positions: np.ndarray
    logweights: np.ndarray
    weights: np.ndarray
    n: int
    law_id: str = ""
    gamma: float = 1.0
    m_gamma: float = 1.0

    @property
    def population(self) -> int:
        return int(self.weights.size)

    @property
    def W(self) -> float:
        return math.fsum(self.weights)

    def summary(self) -> dict:
        return {
            "n": self.n,
            "pop": self.population,
            "W_n": self.W,
            "minlogw": float(self.logweights.min()) if self.population else None,
            "maxlogw": float(self.logweights.max()) if self.population else None,
        }


def root_generation(pp: PointProcessLaw) -> Generation:
    return Generation(np.zeros(1), np.zeros(1), np.ones(1), 0, pp.id, pp.gamma, pp.m_gamma)


def grow(gen: Generation, pp: PointProcessLaw, rng: np.random.Generator, policy: Policy = Policy()) -> Generation:
    if gen.n >= policy.gen_cap:
        raise ValueError(f"Generation {gen.n} has reached gen_cap={policy.gen_cap}.")
    if gen.population == 0:
        raise Extinct(f"{pp.id}: generation {gen.n} is extinct.")
    batch = pp.sample_batch(rng, gen.population)
    size = int(batch.displacements.size)
    if size > policy.pop_cap:
        raise PopulationExplosion(
            f"{pp.id}: generation {gen.n + 1} would hold {size} individuals (cap {policy.pop_cap}).",
            population=size,
        )
    parents = batch.parents
    m = pp.m_gamma
    return Generation(
        positions=gen.positions[parents] + batch.displacements,
        logweights=gen.logweights[parents] + np.log(batch.tilts) - math.log(m),
        weights=gen.weights[parents] * (batch.tilts / m),
        n=gen.n + 1,
        law_id=gen.law_id,
        gamma=gen.gamma,
        m_gamma=m,
    )


@dataclass
class Trajectory:
    W: list[float]
    populations: list[int]
    extinct: bool = False
    truncated: bool = False


def martingale_trajectory(
    pp: PointProcessLaw,
    n_max: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
    summaries: Optional[list] = None,
) -> Trajectory:
    """W_0..W_n for one tree; extinction pads with zeros, gen_cap truncates."""
    require_supercritical(pp)
    gen = root_generation(pp)
    trajectory = Trajectory([1.0], [1])
    if summaries is not None:
        summaries.append(gen.summary())
    horizon = min(n_max, policy.gen_cap)
    trajectory.truncated = n_max > policy.gen_cap
    for _ in range(horizon):
        if gen.population == 0:
            trajectory.extinct = True
            trajectory.W.append(0.0)
            trajectory.populations.append(0)
            continue
        try:
            gen = grow(gen, pp, rng, policy)
        except PopulationExplosion as exc:
            exc.partial = list(trajectory.W)
            raise
        trajectory.W.append(gen.W)
        trajectory.populations.append(gen.population)
        if summaries is not None:
            summaries.append(gen.summary())
    if trajectory.truncated:
        logger.warning(f"{pp.id}: trajectory truncated at gen_cap={policy.gen_cap}")
    return trajectory


# --- Forests: many trees at once ---


@dataclass
class Forest:
    """Individuals of many trees, flattened; `tree` maps each individual to its root."""

    tree: np.ndarray
    weights: np.ndarray
    trees: int
    n: int = 0

    def totals(self) -> np.ndarray:
        return np.bincount(self.tree, weights=self.weights, minlength=self.trees)


def forest_roots(trees: int, weights: Optional[np.ndarray] = None) -> Forest:
    weights = np.ones(trees) if weights is None else np.asarray(weights, dtype=float)
    return Forest(np.arange(trees), weights, trees)


def grow_forest(forest: Forest, pp: PointProcessLaw, rng: np.random.Generator, policy: Policy) -> Forest:
    batch = pp.sample_batch(rng, forest.weights.size)
    parents = batch.parents
    tree = forest.tree[parents]
    sizes = np.bincount(tree, minlength=forest.trees)
    if sizes.size and sizes.max() > policy.pop_cap:
        partial = forest.totals().tolist()
        raise PopulationExplosion(
            f"{pp.id}: a tree reached {int(sizes.max())} individuals in generation {forest.n + 1}.",
            partial=partial,
            population=int(sizes.max()),
        )
    return Forest(tree, forest.weights[parents] * (batch.tilts / pp.m_gamma), forest.trees, forest.n + 1)


def forest_trajectories(
    pp: PointProcessLaw,
    n: int,
    trees: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
) -> np.ndarray:
    """Matrix of W_0..W_n (columns) for `trees` independent trees (rows)."""
    require_supercritical(pp)
    if n > policy.gen_cap:
        raise ValueError(f"n={n} exceeds gen_cap={policy.gen_cap}.")
    out = np.zeros((trees, n + 1))
    forest = forest_roots(trees)
    out[:, 0] = 1.0
    for k in range(1, n + 1):
        if forest.weights.size == 0:
            break
        forest = grow_forest(forest, pp, rng, policy)
        out[:, k] = forest.totals()
    return out


def sample_w(pp: PointProcessLaw, n: int, trees: int, rng: np.random.Generator, policy: Policy = Policy()) -> np.ndarray:
    return forest_trajectories(pp, n, trees, rng, policy)[:, -1]


def maximal_W(trajectories: np.ndarray) -> np.ndarray:
    """W* = sup_n W_n along each row (rows already truncated at gen_cap)."""
    return np.max(np.atleast_2d(trajectories), axis=1)


def size_biased_log_weights(
    pp: PointProcessLaw,
    n: int,
    trees: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
) -> np.ndarray:
    """log L(v) for one individual per surviving tree, picked with probability L(v)/W_n."""
    require_supercritical(pp)
    gen_forest = forest_roots(trees)
    logw = np.zeros(trees)
    for _ in range(n):
        batch = pp.sample_batch(rng, gen_forest.weights.size)
        parents = batch.parents
        logw = logw[parents] + np.log(batch.tilts) - math.log(pp.m_gamma)
        gen_forest = Forest(gen_forest.tree[parents], np.exp(logw), trees, gen_forest.n + 1)
    totals = gen_forest.totals()
    alive = np.flatnonzero(totals > 0)
    order = np.argsort(gen_forest.tree, kind="stable")
    tree_sorted = gen_forest.tree[order]
    cumulative = np.cumsum(gen_forest.weights[order])
    starts = np.searchsorted(tree_sorted, alive, side="left")
    base = np.where(starts > 0, cumulative[np.maximum(starts - 1, 0)], 0.0)
    targets = base + rng.random(alive.size) * totals[alive]
    picks = np.searchsorted(cumulative, targets, side="right")
    ends = np.searchsorted(tree_sorted, alive, side="right") - 1
    picks = np.minimum(picks, ends)
    return logw[order][picks]


# --- Exact laws of W_n ---


def _convolve(left: ExactLaw, right: ExactLaw) -> ExactLaw:
    size = left.size * right.size
    if size > SUPPORT_CAP:
        raise SupportExplosion(f"Convolution support {size} exceeds {SUPPORT_CAP}.", size=size)
    values = (left.values[:, None] + right.values[None, :]).ravel()
    probs = (left.probs[:, None] * right.probs[None, :]).ravel()
    return ExactLaw.from_pairs(values, probs)


def _weighted_sum_law(weights: np.ndarray, base: ExactLaw) -> ExactLaw:
    """Law of sum_i w_i X_i for i.i.d. X_i ~ base."""
    if weights.size == 0:
        return ExactLaw.point_mass(0.0)
    law = ExactLaw(base.values * weights[0], base.probs.copy())
    for w in weights[1:]:
        law = _convolve(law, ExactLaw(base.values * w, base.probs.copy()))
    return law


def _mixture(parts: list[tuple[ExactLaw, float]]) -> ExactLaw:
    values = np.concatenate([law.values for law, _ in parts])
    probs = np.concatenate([law.probs * p for law, p in parts])
    return ExactLaw.from_pairs(values, probs)


def exact_w_law(pp: PointProcessLaw, n: int) -> ExactLaw:
    """Law of W_n by first-generation recursion W_n = sum_i L_i W_{n-1}^(i)."""
    weighted, _ = _weights(pp)
    law = ExactLaw.point_mass(1.0)
    for _ in range(n):
        law = _mixture([(_weighted_sum_law(w, law), p) for w, p in weighted if p > 0])
    return law


def grafted_law(pp: PointProcessLaw, n: int, m: int) -> ExactLaw:
    """Law of sum_{|v|=n} L(v) W_m(v), enumerating generation n top-down."""
    weighted, _ = _weights(pp)
    generations: list[tuple[np.ndarray, float]] = [(np.ones(1), 1.0)]
    for _ in range(n):
        expanded = []
        for parent_weights, prob in generations:
            expanded.extend(_children_configurations(parent_weights, prob, weighted))
        generations = expanded
    subtree = exact_w_law(pp, m)
    return _mixture([(_weighted_sum_law(w, subtree), p) for w, p in generations])


def _children_configurations(parent_weights: np.ndarray, prob: float, weighted: list) -> list:
    configurations = [(np.empty(0), prob)]
    for weight in parent_weights:
        configurations = [
            (np.concatenate((acc, weight * child)), p * q)
            for acc, p in configurations
            for child, q in weighted
            if q > 0
        ]
    return configurations


# --- Fixed-point check ---


@dataclass
class FixpointReport:
    n: int
    m: int
    ks: Optional[KSReport] = None
    exact_match: Optional[bool] = None
    exact_atoms: int = 0
    detail: dict = field(default_factory=dict)

    @property
    def distance(self) -> float:
        return self.ks.distance if self.ks else 0.0

    @property
    def passed(self) -> bool:
        exact_ok = self.exact_match is not False
        return exact_ok and (self.ks is None or self.ks.passed)


def grafted_samples(
    pp: PointProcessLaw,
    n: int,
    m: int,
    trees: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
) -> np.ndarray:
    """sum_{|v|=n} L(v) W_m(v) with independent subtrees grafted on a realized generation n."""
    forest = forest_roots(trees)
    for _ in range(n):
        forest = grow_forest(forest, pp, rng, policy)
    subtrees = forest_trajectories(pp, m, forest.weights.size, rng, policy)[:, -1] if forest.weights.size else np.empty(0)
    return np.bincount(forest.tree, weights=forest.weights * subtrees, minlength=trees)


def check_fixpoint(
    pp: PointProcessLaw,
    n: int,
    m: int,
    rng: np.random.Generator,
    reps: int,
    policy: Policy = Policy(),
    alpha: float = 0.01,
) -> FixpointReport:
    if n + m > policy.gen_cap:
        raise ValueError(f"n + m = {n + m} exceeds gen_cap={policy.gen_cap}.")
    report = FixpointReport(n, m)
    if pp.is_enumerable() and n + m <= EXACT_FIXPOINT_DEPTH:
        direct = exact_w_law(pp, n + m)
        grafted = grafted_law(pp, n, m)
        report.exact_match = direct.matches(grafted)
        report.exact_atoms = direct.size
        report.detail["exact_atoms"] = direct.atoms()
    direct_samples = sample_w(pp, n + m, reps, rng, policy)
    grafted_draws = grafted_samples(pp, n, m, reps, rng, policy)
    report.ks = ks_two_sample(direct_samples, grafted_draws, alpha)
    logger.debug(f"check_fixpoint({pp.id}, n={n}, m={m}): KS {report.ks.distance:.4g} vs {report.ks.critical:.4g}")
    return report
