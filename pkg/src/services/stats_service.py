import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np
from scipy.stats import ks_2samp, kstwobign, norm

from models import CurvePoint, EstimateReport
from services.errors import SupportExplosion
from services.law_service import FiniteMQLaw

logger = logging.getLogger("perpetua.stats_service")

CHUNK_SIZE = int(os.getenv("PERPETUA_CHUNK", "4096"))
MERGE_TOL = 1e-12
MASS_FLOOR = 1e-15
MASS_TOL = 1e-10
SUPPORT_CAP = 10_000_000

GROWTH_SCHEDULE = tuple(2**k for k in range(12, 23))
QUICK_GROWTH_SCHEDULE = tuple(2**k for k in range(10, 19))
GROWTH_GROUPS = 256
CONVERGING_BAND = 0.05
DIVERGING_RATIO = 1.25
GROWTH_WINDOW = 3

MIN_HITS = 20
RATIO_CAP = 1e3
STABILITY_FACTOR = 4.0


def z_value(confidence: float) -> float:
    return float(norm.ppf(0.5 + confidence / 2.0))


# --- Streaming moments ---


class RunningMoments:
    """Mean and variance by batched Welford updates with Chan's merge rule."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def push(self, value: float) -> None:
        self.n += 1
        delta = value - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (value - self.mean)

    def push_batch(self, values) -> None:
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 0:
            return
        batch = RunningMoments()
        batch.n = int(values.size)
        batch.mean = float(values.mean())
        batch.m2 = float(np.sum((values - batch.mean) ** 2))
        self.merge(batch)

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean, other.m2
            return self
        total = self.n + other.n
        delta = other.mean - self.mean
        self.mean += delta * other.n / total
        self.m2 += other.m2 + delta * delta * self.n * other.n / total
        self.n = total
        return self

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def stderr(self) -> float:
        return math.sqrt(max(self.variance, 0.0) / self.n) if self.n > 0 else math.inf

    @classmethod
    def of(cls, values) -> "RunningMoments":
        moments = cls()
        moments.push_batch(values)
        return moments


def pairwise_merge(parts: list[RunningMoments]) -> RunningMoments:
    """Merge in a fixed binary tree so the result depends only on the order of parts."""
    if not parts:
        return RunningMoments()
    layer = list(parts)
    while len(layer) > 1:
        merged = []
        for i in range(0, len(layer) - 1, 2):
            left = RunningMoments().merge(layer[i])
            merged.append(left.merge(layer[i + 1]))
        if len(layer) % 2:
            merged.append(layer[-1])
        layer = merged
    return layer[0]


def report_from_moments(
    moments: RunningMoments,
    confidence: float = 0.99,
    seed: int = 0,
    law_id: str = "",
    tag: str = "",
) -> EstimateReport:
    stderr = moments.stderr if moments.n > 1 else 0.0
    half = z_value(confidence) * stderr
    estimate = moments.mean
    return EstimateReport(
        estimate=estimate,
        stderr=stderr,
        n=moments.n,
        ci=(estimate - half, estimate + half),
        seed=seed,
        law_id=law_id,
        tag=tag,
    )


def exact_report(value: float, n: int = 0, seed: int = 0, law_id: str = "", tag: str = "") -> EstimateReport:
    return EstimateReport(estimate=value, stderr=0.0, n=n, ci=(value, value), seed=seed, law_id=law_id, tag=tag)


def mc_mean(
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    reps: int,
    rng: np.random.Generator,
    confidence: float = 0.99,
    seed: int = 0,
    law_id: str = "",
    tag: str = "",
    chunk: int = CHUNK_SIZE,
) -> EstimateReport:
    if reps < 2:
        raise ValueError(f"mc_mean needs at least 2 replicates, got {reps}.")
    parts = []
    remaining = reps
    while remaining > 0:
        size = min(chunk, remaining)
        parts.append(RunningMoments.of(sampler(rng, size)))
        remaining -= size
    return report_from_moments(pairwise_merge(parts), confidence, seed, law_id, tag)


def combined_difference(lhs: EstimateReport, rhs: EstimateReport) -> tuple[float, float]:
    """|lhs - rhs| and the combined standard error of the difference."""
    return abs(lhs.estimate - rhs.estimate), math.hypot(lhs.stderr, rhs.stderr)


def agrees(lhs: EstimateReport, rhs: EstimateReport, sigmas: float = 3.0) -> bool:
    gap, sigma = combined_difference(lhs, rhs)
    return gap <= sigmas * sigma + 1e-12 * (1.0 + abs(rhs.estimate))


def within(report: EstimateReport, target: float, sigmas: float = 3.0) -> bool:
    return abs(report.estimate - target) <= sigmas * report.stderr + 1e-12 * (1.0 + abs(target))


# --- Exact discrete laws ---


@dataclass
class ExactLaw:
    values: np.ndarray
    probs: np.ndarray
    deficit: float = 0.0

    @classmethod
    def from_pairs(cls, values, probs, merge_tol: float = MERGE_TOL, floor: float = MASS_FLOOR) -> "ExactLaw":
        values = np.asarray(values, dtype=float).ravel()
        probs = np.asarray(probs, dtype=float).ravel()
        order = np.argsort(values, kind="stable")
        values, probs = values[order], probs[order]
        if values.size:
            gaps = np.diff(values) > merge_tol * np.maximum(1.0, np.abs(values[1:]))
            starts = np.concatenate(([0], np.flatnonzero(gaps) + 1))
            probs = np.add.reduceat(probs, starts)
            values = values[starts]
        kept = probs >= floor
        deficit = float(probs[~kept].sum())
        law = cls(values[kept], probs[kept], deficit)
        total = float(law.probs.sum())
        if abs(total + deficit - 1.0) > MASS_TOL:
            logger.warning(f"Exact law mass {total + deficit:.12f} deviates from 1.")
        if deficit > 0:
            logger.warning(f"Exact law dropped mass {deficit:.3g} below the floor {floor:g}.")
        return law

    @classmethod
    def point_mass(cls, value: float) -> "ExactLaw":
        return cls(np.array([float(value)]), np.array([1.0]))

    @property
    def size(self) -> int:
        return int(self.values.size)

    def atoms(self) -> list[tuple[float, float]]:
        return [(float(v), float(p)) for v, p in zip(self.values, self.probs)]

    def mean(self) -> float:
        return math.fsum(self.values * self.probs)

    def moment(self, fn: Callable) -> float:
        return math.fsum(np.asarray(fn(self.values), dtype=float) * self.probs)

    def mass_at(self, value: float, tol: float = MERGE_TOL) -> float:
        hit = np.abs(self.values - value) <= tol * max(1.0, abs(value))
        return float(self.probs[hit].sum())

    def cdf(self, x):
        cumulative = np.cumsum(self.probs)
        idx = np.searchsorted(self.values, np.asarray(x, dtype=float), side="right")
        return np.where(idx > 0, cumulative[np.maximum(idx - 1, 0)], 0.0)

    def matches(self, other: "ExactLaw", tol: float = MERGE_TOL) -> bool:
        if self.size != other.size:
            return False
        value_ok = np.all(np.abs(self.values - other.values) <= tol * np.maximum(1.0, np.abs(self.values)))
        return bool(value_ok and np.all(np.abs(self.probs - other.probs) <= tol))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.values, size=size, p=self.probs / self.probs.sum())


def _merge_joint(pi: np.ndarray, z: np.ndarray, p: np.ndarray, tol: float = MERGE_TOL):
    order = np.lexsort((z, pi))
    pi, z, p = pi[order], z[order], p[order]
    if pi.size == 0:
        return pi, z, p
    new_pi = np.abs(np.diff(pi)) > tol * np.maximum(1.0, np.abs(pi[1:]))
    new_z = np.abs(np.diff(z)) > tol * np.maximum(1.0, np.abs(z[1:]))
    starts = np.concatenate(([0], np.flatnonzero(new_pi | new_z) + 1))
    return pi[starts], z[starts], np.add.reduceat(p, starts)


def dp_exact_zn(law: FiniteMQLaw, n: int) -> tuple[ExactLaw, ExactLaw]:
    """Exact laws of Z_n and Pi_n by forward convolution of the joint state (Pi_k, Z_k)."""
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}.")
    support = law.support()
    m = np.array([a[0][0] for a in support])
    q = np.array([a[0][1] for a in support])
    w = np.array([a[1] for a in support])
    pi, z, p = np.array([1.0]), np.array([0.0]), np.array([1.0])
    for step in range(n):
        size = pi.size * m.size
        if size > SUPPORT_CAP:
            raise SupportExplosion(f"Joint support reached {size} states at step {step + 1}.", size=size)
        new_z = (z[:, None] + pi[:, None] * q[None, :]).ravel()
        new_pi = (pi[:, None] * m[None, :]).ravel()
        new_p = (p[:, None] * w[None, :]).ravel()
        pi, z, p = _merge_joint(new_pi, new_z, new_p)
        logger.debug(f"dp_exact_zn step {step + 1}: {pi.size} joint states")
    return ExactLaw.from_pairs(z, p), ExactLaw.from_pairs(pi, p)


# --- Tail curves ---


def wilson_interval(successes: int, n: int, confidence: float = 0.99) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    z = z_value(confidence)
    p = successes / n
    denominator = 1 + z**2 / n
    center = (p + z**2 / (2 * n)) / denominator
    spread = z * math.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denominator
    return max(0.0, center - spread), min(1.0, center + spread)


@dataclass
class TailCurve:
    points: list[CurvePoint]
    n: int
    hits: list[int] = field(default_factory=list)

    @property
    def t(self) -> np.ndarray:
        return np.array([p.t for p in self.points])


def tail_curve(samples, t_grid, confidence: float = 0.99) -> TailCurve:
    """P{X > t} per grid point with Wilson intervals."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing.")
    ordered = np.sort(np.asarray(samples, dtype=float).ravel())
    n = int(ordered.size)
    hits = n - np.searchsorted(ordered, t_grid, side="right")
    points = []
    for t, k in zip(t_grid, hits):
        estimate = k / n if n else 0.0
        lo, hi = wilson_interval(int(k), n, confidence)
        points.append(CurvePoint(t=float(t), estimate=estimate, lo=min(lo, estimate), hi=max(hi, estimate)))
    return TailCurve(points, n, [int(k) for k in hits])


# --- Kolmogorov-Smirnov ---


@dataclass
class KSReport:
    distance: float
    critical: float
    n: int
    alpha: float

    @property
    def passed(self) -> bool:
        return self.distance <= self.critical


def ks_critical(n: int, alpha: float = 0.01, m: Optional[int] = None) -> float:
    effective = n if m is None else n * m / (n + m)
    return float(kstwobign.isf(alpha)) / math.sqrt(effective)


def ks_against_exact(samples, law: ExactLaw, alpha: float = 0.01) -> KSReport:
    """KS distance of samples to a discrete exact law; samples snap to their nearest atom."""
    samples = np.asarray(samples, dtype=float).ravel()
    idx = np.clip(np.searchsorted(law.values, samples), 1, max(law.size - 1, 1))
    if law.size > 1:
        left = law.values[idx - 1]
        right = law.values[idx]
        idx = np.where(np.abs(samples - left) <= np.abs(right - samples), idx - 1, idx)
    else:
        idx = np.zeros(samples.size, dtype=int)
    counts = np.bincount(idx, minlength=law.size)
    empirical = np.cumsum(counts) / samples.size
    distance = float(np.max(np.abs(empirical - np.cumsum(law.probs))))
    return KSReport(distance, ks_critical(samples.size, alpha), int(samples.size), alpha)


def ks_two_sample(a, b, alpha: float = 0.01) -> KSReport:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    result = ks_2samp(a, b)
    return KSReport(float(result.statistic), ks_critical(a.size, alpha, b.size), int(a.size), alpha)


# --- Inequalities ---


@dataclass
class InequalityPoint:
    t: float
    lhs: float
    rhs: float
    bound: float
    passed: bool
    ratio: Optional[float] = None


@dataclass
class InequalityReport:
    mode: Literal["fixed", "existential"]
    constant: float
    slack: float
    points: list[InequalityPoint]
    bounded: bool = True
    stable: bool = True
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.bounded and self.stable and all(p.passed for p in self.points)

    @property
    def max_ratio(self) -> float:
        ratios = [p.ratio for p in self.points if p.ratio is not None]
        return max(ratios) if ratios else math.nan


def inequality_check(
    lhs: TailCurve,
    rhs: TailCurve,
    constant: float = 1.0,
    slack: float = 0.0,
    mode: Literal["fixed", "existential"] = "fixed",
) -> InequalityReport:
    """Check lhs <= constant * rhs + slack pointwise on a common grid.

    Fixed mode compares the upper bound of lhs with the lower bound of rhs.
    Existential mode uses RATIO_CAP as the constant, checks only points
    where rhs has MIN_HITS exceedances, and also requires the ratio curve to
    stay within STABILITY_FACTOR of its median across the top decade of t.
    """
    if len(lhs.points) != len(rhs.points) or not np.allclose(lhs.t, rhs.t):
        raise ValueError("Curves must share a grid.")
    if mode == "existential":
        constant = RATIO_CAP
    points = []
    for i, (left, right) in enumerate(zip(lhs.points, rhs.points)):
        if mode == "existential" and (not rhs.hits or rhs.hits[i] < MIN_HITS):
            continue
        bound = constant * right.lo + slack
        ratio = left.estimate / right.estimate if right.estimate > 0 else None
        points.append(InequalityPoint(left.t, left.hi, right.lo, bound, left.hi <= bound, ratio))
    report = InequalityReport(mode, constant, slack, points, checked=len(points))
    if mode == "existential" and points:
        ratios = np.array([p.ratio for p in points if p.ratio is not None])
        ts = np.array([p.t for p in points if p.ratio is not None])
        report.bounded = bool(ratios.size and np.all(np.isfinite(ratios)) and ratios.max() <= RATIO_CAP)
        if ratios.size:
            top = ratios[ts >= ts.max() / 10.0]
            report.stable = bool(top.max() <= STABILITY_FACTOR * max(np.median(ratios), 1e-300))
    return report


def best_existential_constant(lhs: TailCurve, rhs: TailCurve) -> float:
    """Smallest constant making lhs.estimate <= constant * rhs.estimate on points with enough hits."""
    ratios = [
        left.estimate / right.estimate
        for left, right, k in zip(lhs.points, rhs.points, rhs.hits)
        if k >= MIN_HITS and right.estimate > 0
    ]
    return max(ratios) if ratios else math.nan


# --- Moment growth ---


@dataclass
class GrowthReport:
    verdict: Literal["converging", "diverging", "inconclusive"]
    schedule: list[int]
    means: list[float]
    ratios: list[float]


def _ratio(current: float, previous: float) -> float:
    if previous == 0:
        return 1.0 if current == 0 else math.inf
    return current / previous


def moment_growth_diagnostic(
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    rng: np.random.Generator,
    schedule: tuple[int, ...] = GROWTH_SCHEDULE,
    groups: int = GROWTH_GROUPS,
) -> GrowthReport:
    """Median-of-means running estimates along a doubling schedule.

    Converging when the last GROWTH_WINDOW ratios of successive estimates
    lie within CONVERGING_BAND of 1; diverging when they all exceed
    DIVERGING_RATIO. A heuristic: finite samples never prove finiteness.
    """
    if any(n % groups for n in schedule) or list(schedule) != sorted(schedule):
        raise ValueError(f"Schedule must increase and be divisible by {groups}.")
    sums = np.zeros(groups)
    drawn = 0
    means = []
    for target in schedule:
        batch = np.asarray(sampler(rng, target - drawn), dtype=float)
        # draw i goes to group i mod groups
        sums += batch.reshape(-1, groups).sum(axis=0)
        drawn = target
        means.append(float(np.median(sums / (drawn // groups))))
        logger.debug(f"moment growth: N={drawn} median-of-means={means[-1]:.6g}")
    ratios = [_ratio(b, a) for a, b in zip(means[:-1], means[1:])]
    window = ratios[-GROWTH_WINDOW:]
    if len(window) == GROWTH_WINDOW and all(abs(r - 1.0) < CONVERGING_BAND for r in window):
        verdict = "converging"
    elif len(window) == GROWTH_WINDOW and all(r > DIVERGING_RATIO for r in window):
        verdict = "diverging"
    else:
        verdict = "inconclusive"
    return GrowthReport(verdict, list(schedule), means, ratios)
