import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Union

import numpy as np
from scipy.special import logsumexp

from models import EstimateReport, Policy
from services.errors import BadEta, NonConvergent, UnsupportedConditioning
from services.law_service import (
    AEvaluator,
    FiniteMQLaw,
    LogParetoQLaw,
    MQLaw,
    a_evaluator,
    classify_regime,
    draw,
)
from services.stats_service import RunningMoments, report_from_moments

logger = logging.getLogger("perpetua.perpetuity_service")

UNDERFLOW_LOG = -745.0
STEP_BLOCK = 64
ETA_PILOT = 4096
ETA_HORIZON = 64
ETA_QUANTILE = 0.9
LOG_TERMS = 32
CONDITIONING_TOL = 1e-12


@dataclass(frozen=True)
class NotReached:
    n: int


Epoch = Union[int, NotReached]


# --- Paths ---


@dataclass
class PerpetuityPath:
    m: np.ndarray
    q: np.ndarray
    logpi: np.ndarray
    signs: np.ndarray
    z: np.ndarray
    underflow: np.ndarray
    seed: int = 0
    law_id: str = ""

    @property
    def n(self) -> int:
        return int(self.m.size)

    @property
    def abs_pi(self) -> np.ndarray:
        """|Pi_k| for k = 0..n, from exact products where they are representable."""
        with np.errstate(over="ignore", under="ignore"):
            linear = np.concatenate(([1.0], np.cumprod(np.abs(self.m))))
            fallback = np.exp(-self.logpi)
        usable = np.isfinite(linear) & (linear > 0)
        return np.where(usable, linear, fallback)

    @property
    def pi(self) -> np.ndarray:
        return self.signs * self.abs_pi

    def log_terms(self) -> np.ndarray:
        """log|Pi_{k-1} Q_k| for k = 1..n."""
        with np.errstate(divide="ignore"):
            return -self.logpi[:-1] + np.log(np.abs(self.q))

    def records(self) -> list[dict]:
        return [
            {
                "k": k,
                "m": float(self.m[k - 1]) if k else None,
                "q": float(self.q[k - 1]) if k else None,
                "logpi": float(self.logpi[k]),
                "sign": int(self.signs[k]),
                "z": float(self.z[k]),
            }
            for k in range(self.n + 1)
        ]


def path_from_draws(m, q, seed: int = 0, law_id: str = "") -> PerpetuityPath:
    m = np.asarray(m, dtype=float)
    q = np.asarray(q, dtype=float)
    logpi = np.concatenate(([0.0], np.cumsum(-np.log(np.abs(m)))))
    signs = np.concatenate(([1.0], np.cumprod(np.sign(m))))
    path = PerpetuityPath(m, q, logpi, signs, np.zeros(m.size + 1), np.zeros(m.size, dtype=bool), seed, law_id)
    with np.errstate(divide="ignore"):
        log_increments = path.log_terms()
    increments = signs[:-1] * path.abs_pi[:-1] * q
    underflow = (log_increments < UNDERFLOW_LOG) & (q != 0)
    increments = np.where(underflow, 0.0, increments)
    if np.any(underflow):
        logger.debug(f"{int(underflow.sum())} increments below e^{UNDERFLOW_LOG:g} recorded as zero")
    path.z = np.concatenate(([0.0], np.cumsum(increments)))
    path.underflow = underflow
    return path


def simulate_path(law: MQLaw, n: int, rng: np.random.Generator, seed: int = 0) -> PerpetuityPath:
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}.")
    m, q = draw(law, rng, n) if n else (np.empty(0), np.empty(0))
    return path_from_draws(m, q, seed, law.id)


def forward_ifs(law: MQLaw, phi0: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Phi_0..Phi_n with Phi_k = Q_k + M_k Phi_{k-1}, drawing in the same order as simulate_path."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}.")
    m, q = draw(law, rng, n)
    phi = np.empty(n + 1)
    phi[0] = phi0
    for k in range(n):
        phi[k + 1] = q[k] + m[k] * phi[k]
    return phi


# --- Z infinity ---


@dataclass
class ZinfResult:
    value: float
    status: Literal["truncated", "degenerate"]
    last_increment: float
    steps: int


def _fixed_point_shortcut(law: MQLaw) -> Optional[float]:
    if not isinstance(law, FiniteMQLaw):
        return None
    c = law.fixed_point()
    if c is None or classify_regime(law).case == "divergent":
        return None
    return c


def simulate_zinf(law: MQLaw, policy: Policy, rng: np.random.Generator, absolute: bool = False) -> ZinfResult:
    """Iterate until |Pi_n| <= eps and the last quiet_steps increments are <= eps."""
    c = _fixed_point_shortcut(law)
    if c is not None:
        return ZinfResult(abs(c) if absolute else c, "degenerate", 0.0, 0)
    batch = sample_zinf_batch(law, 1, rng, policy, absolute)
    if batch.unconverged:
        raise NonConvergent(
            f"{law.id}: no convergence within nmax={policy.nmax}.",
            steps=int(batch.steps[0]),
            growth_flag=bool(batch.growth[0]),
        )
    return ZinfResult(float(batch.values[0]), "truncated", float(batch.last_increment[0]), int(batch.steps[0]))


@dataclass
class ZinfBatch:
    values: np.ndarray
    steps: np.ndarray
    last_increment: np.ndarray
    converged: np.ndarray
    growth: np.ndarray

    @property
    def unconverged(self) -> int:
        return int((~self.converged).sum())


def sample_zinf_batch(
    law: MQLaw,
    size: int,
    rng: np.random.Generator,
    policy: Policy,
    absolute: bool = False,
) -> ZinfBatch:
    """Replicates of Z_inf (or Z*_inf) run in lockstep; draws come in blocks of STEP_BLOCK steps."""
    values = np.zeros(size)
    abs_pi = np.ones(size)
    log_pi = np.zeros(size)
    sign = np.ones(size)
    quiet = np.zeros(size, dtype=np.int64)
    steps = np.zeros(size, dtype=np.int64)
    last = np.zeros(size)
    half_values = np.zeros(size)
    live = np.ones(size, dtype=bool)
    converged = np.zeros(size, dtype=bool)
    threshold = -math.log(policy.eps)
    taken = 0
    while np.any(live) and taken < policy.nmax:
        block = min(STEP_BLOCK, policy.nmax - taken)
        active = np.flatnonzero(live)
        m, q = draw(law, rng, active.size * block)
        m, q = m.reshape(active.size, block), q.reshape(active.size, block)
        for j in range(block):
            running = live[active]
            idx = active[running]
            if idx.size == 0:
                break
            mj, qj = m[running, j], q[running, j]
            with np.errstate(over="ignore", under="ignore", invalid="ignore"):
                increment = sign[idx] * abs_pi[idx] * qj
                if absolute:
                    increment = np.abs(increment)
                values[idx] += increment
                abs_pi[idx] *= np.abs(mj)
                log_pi[idx] -= np.log(np.abs(mj))
            sign[idx] *= np.sign(mj)
            steps[idx] += 1
            last[idx] = np.abs(increment)
            quiet[idx] = np.where(np.abs(increment) <= policy.eps, quiet[idx] + 1, 0)
            if taken + j + 1 == policy.nmax // 2:
                half_values[idx] = values[idx]
            representable = np.isfinite(abs_pi[idx]) & (abs_pi[idx] > 0)
            small_pi = np.where(representable, abs_pi[idx] <= policy.eps, log_pi[idx] >= threshold)
            done = small_pi & (quiet[idx] >= policy.quiet_steps)
            blown = ~np.isfinite(values[idx])
            converged[idx[done]] = True
            live[idx[done | blown]] = False
        taken += block
    growth = ~converged & ((~np.isfinite(values)) | (np.abs(values) > 2.0 * np.abs(half_values) + 1.0))
    if np.any(~converged):
        logger.warning(f"{law.id}: {int((~converged).sum())} of {size} replicates did not converge")
    return ZinfBatch(values, steps, last, converged, growth)


def sample_zinf(law: MQLaw, rng: np.random.Generator, size: int, policy: Policy, absolute: bool = False) -> np.ndarray:
    """Converged Z_inf draws; raises NonConvergent if any replicate hits nmax."""
    c = _fixed_point_shortcut(law)
    if c is not None:
        return np.full(size, abs(c) if absolute else c)
    batch = sample_zinf_batch(law, size, rng, policy, absolute)
    if batch.unconverged:
        raise NonConvergent(
            f"{law.id}: {batch.unconverged} of {size} replicates did not converge within nmax={policy.nmax}.",
            steps=int(batch.steps.max()),
            count=batch.unconverged,
            growth_flag=bool(batch.growth.any()),
        )
    return batch.values


def sample_log_zinf(
    law: MQLaw,
    rng: np.random.Generator,
    size: int,
    terms: int = LOG_TERMS,
) -> np.ndarray:
    """log Z_inf for positive laws, summing the first `terms` terms in log space.

    Laws that can draw the largest remaining term (heavy log-Pareto Q)
    add it as a completion of the tail.
    """
    if not law.is_positive():
        raise ValueError(f"{law.id} is not a positive law.")
    log_m, log_q = law.sample_log(rng, size * terms)
    log_m, log_q = log_m.reshape(size, terms), log_q.reshape(size, terms)
    log_pi_before = np.concatenate((np.zeros((size, 1)), np.cumsum(log_m, axis=1)[:, :-1]), axis=1)
    log_terms = log_pi_before + log_q
    if isinstance(law, LogParetoQLaw):
        far = law.far_log_max(rng, size, terms)
        log_terms = np.concatenate((log_terms, far[:, None]), axis=1)
    return logsumexp(log_terms, axis=1)


# --- Ladder epochs ---


def _first_index(mask: np.ndarray, n: int) -> Epoch:
    hits = np.flatnonzero(mask)
    return int(hits[0]) + 1 if hits.size else NotReached(n)


def ladder_epoch(path: PerpetuityPath) -> Epoch:
    """First n >= 1 with |Pi_n| <= 1."""
    return _first_index(path.abs_pi[1:] <= 1.0, path.n)


def sigma_x(path: PerpetuityPath, x: float) -> Epoch:
    """First n >= 1 with |Pi_n| < x."""
    if not 0 < x <= 1:
        raise ValueError(f"x must lie in (0,1], got {x}.")
    return _first_index(path.abs_pi[1:] < x, path.n)


def dual_sigma_star(path: PerpetuityPath) -> Epoch:
    """First n >= 1 with |Pi_n| > 1."""
    return _first_index(path.abs_pi[1:] > 1.0, path.n)


def sample_sigma_x(law: MQLaw, x: float, size: int, rng: np.random.Generator, nmax: int) -> np.ndarray:
    """sigma(x) for `size` replicates in lockstep; replicates beyond nmax raise NonConvergent."""
    if not 0 < x <= 1:
        raise ValueError(f"x must lie in (0,1], got {x}.")
    abs_pi = np.ones(size)
    log_pi = np.zeros(size)
    epochs = np.zeros(size, dtype=np.int64)
    live = np.ones(size, dtype=bool)
    threshold = -math.log(x)
    taken = 0
    while np.any(live) and taken < nmax:
        block = min(STEP_BLOCK, nmax - taken)
        active = np.flatnonzero(live)
        m, _ = draw(law, rng, active.size * block)
        m = m.reshape(active.size, block)
        for j in range(block):
            running = live[active]
            idx = active[running]
            if idx.size == 0:
                break
            with np.errstate(under="ignore", over="ignore"):
                abs_pi[idx] *= np.abs(m[running, j])
                log_pi[idx] -= np.log(np.abs(m[running, j]))
            representable = np.isfinite(abs_pi[idx]) & (abs_pi[idx] > 0)
            hit = np.where(representable, abs_pi[idx] < x, log_pi[idx] > threshold)
            epochs[idx[hit]] = taken + j + 1
            live[idx[hit]] = False
        taken += block
    if np.any(live):
        raise NonConvergent(f"{law.id}: sigma({x:g}) exceeded nmax={nmax}.", steps=nmax, count=int(live.sum()))
    return epochs


@dataclass
class LadderDecomposition:
    sigma_epochs: list[int]
    mhat: list[float]
    qtilde: list[float]
    qhat: list[float]
    signs: list[float]
    z_completed: float
    steps: int

    def reconstruct(self) -> float:
        """sum_j Pihat_{j-1} Qhat_j over completed blocks."""
        total = []
        running = 1.0
        for mhat, sign, qhat in zip(self.mhat, self.signs, self.qhat):
            total.append(running * qhat)
            running *= sign * mhat
        return math.fsum(total)


def _block_length(m: np.ndarray, start: int) -> Optional[int]:
    """Length of the ladder block starting at `start`, or None if it does not close within m."""
    window = STEP_BLOCK
    while True:
        segment = m[start : start + window]
        with np.errstate(over="ignore", under="ignore"):
            partial = np.abs(np.cumprod(segment))
        log_partial = np.cumsum(np.log(np.abs(segment)))
        representable = np.isfinite(partial) & (partial > 0)
        closing = np.flatnonzero(np.where(representable, partial <= 1.0, log_partial <= 0.0))
        if closing.size:
            return int(closing[0]) + 1
        if start + window >= m.size:
            return None
        window *= 2


def _split_blocks(m: np.ndarray, q: np.ndarray, decomposition: LadderDecomposition, limit: int) -> int:
    """Append completed blocks of (m, q) to `decomposition`; returns the number of steps consumed."""
    start = 0
    while start < m.size and len(decomposition.sigma_epochs) < limit:
        length = _block_length(m, start)
        if length is None:
            break
        with np.errstate(over="ignore", under="ignore"):
            products = np.concatenate(([1.0], np.cumprod(m[start : start + length])))
        decomposition.sigma_epochs.append(length)
        decomposition.mhat.append(float(abs(products[-1])))
        decomposition.signs.append(float(np.sign(products[-1])))
        decomposition.qtilde.append(float(max(1.0, np.max(np.abs(products[:-1])))))
        decomposition.qhat.append(math.fsum(products[:-1] * q[start : start + length]))
        start += length
    decomposition.steps += start
    return start


def ladder_blocks_from_draws(m, q) -> LadderDecomposition:
    """Split realized draws into ladder blocks; an incomplete final block is dropped."""
    m = np.asarray(m, dtype=float)
    q = np.asarray(q, dtype=float)
    decomposition = LadderDecomposition([], [], [], [], [], 0.0, 0)
    used = _split_blocks(m, q, decomposition, limit=m.size)
    decomposition.z_completed = float(path_from_draws(m[:used], q[:used]).z[-1])
    return decomposition


def ladder_decompose(law: MQLaw, blocks: int, rng: np.random.Generator, nmax: int = 1_000_000) -> LadderDecomposition:
    """Simulate until `blocks` ladder blocks have closed; the blocks are i.i.d. by construction."""
    if blocks < 1:
        raise ValueError(f"blocks must be at least 1, got {blocks}.")
    if classify_regime(law, budget=1 << 16, rng=rng).case == "divergent":
        raise NonConvergent(f"{law.id} is divergent; ladder blocks need not close.", steps=0)
    decomposition = LadderDecomposition([], [], [], [], [], 0.0, 0)
    used_m, used_q = [], []
    pending_m, pending_q = np.empty(0), np.empty(0)
    while len(decomposition.sigma_epochs) < blocks:
        m, q = draw(law, rng, max(STEP_BLOCK, 2 * (blocks - len(decomposition.sigma_epochs))))
        pending_m, pending_q = np.concatenate((pending_m, m)), np.concatenate((pending_q, q))
        used = _split_blocks(pending_m, pending_q, decomposition, blocks)
        used_m.append(pending_m[:used])
        used_q.append(pending_q[:used])
        pending_m, pending_q = pending_m[used:], pending_q[used:]
        if pending_m.size > nmax:
            raise NonConvergent(f"{law.id}: a ladder block exceeded nmax={nmax} steps.", steps=nmax)
    all_m, all_q = np.concatenate(used_m), np.concatenate(used_q)
    decomposition.z_completed = float(path_from_draws(all_m, all_q).z[-1])
    logger.debug(f"ladder_decompose: {blocks} blocks over {decomposition.steps} steps")
    return decomposition


# --- Symmetrization ---


@dataclass
class SymmetrizedDraws:
    pi2: np.ndarray
    q2: np.ndarray
    q2_prime: np.ndarray
    mode: Literal["independent", "finite"]
    degenerate: bool = False
    bias_flag: bool = False

    @property
    def qbar(self) -> np.ndarray:
        return self.q2 - self.q2_prime


def _grouped_pairs(law: FiniteMQLaw):
    support = law.support()
    m1 = np.array([a[0][0] for a in support])[:, None]
    q1 = np.array([a[0][1] for a in support])[:, None]
    p1 = np.array([a[1] for a in support])[:, None]
    product = (m1 * m1.T).ravel()
    q2 = (q1 + m1 * q1.T).ravel()
    probs = (p1 * p1.T).ravel()
    order = np.lexsort((q2, product))
    product, q2, probs = product[order], q2[order], probs[order]
    splits = np.abs(np.diff(product)) > CONDITIONING_TOL * np.maximum(1.0, np.abs(product[1:]))
    bias = bool(np.any((np.diff(product) != 0) & ~splits))
    group = np.concatenate(([0], np.cumsum(splits)))
    return product, q2, probs, group, bias


def pair_symmetrization(law: MQLaw, rng: np.random.Generator, size: int) -> SymmetrizedDraws:
    """Draws of (M1 M2, Q^(2), Q'^(2)) with Q'^(2) conditionally i.i.d. given the product."""
    if isinstance(law, FiniteMQLaw):
        product, q2, probs, group, bias = _grouped_pairs(law)
        picks = rng.choice(product.size, size=size, p=probs / probs.sum())
        totals = np.bincount(group, weights=probs)
        within = np.zeros_like(probs)
        for g in range(totals.size):
            members = np.flatnonzero(group == g)
            within[members] = np.cumsum(probs[members]) / totals[g]
            within[members[-1]] = 1.0
        keyed = group + np.minimum(within, 1.0)
        draws_group = group[picks]
        partner = np.searchsorted(keyed, draws_group + rng.random(size), side="right")
        partner = np.minimum(partner, product.size - 1)
        result = SymmetrizedDraws(product[picks], q2[picks], q2[partner], "finite", bias_flag=bias)
        if bias:
            logger.warning(f"{law.id}: products merged within tolerance {CONDITIONING_TOL:g}; conditioning is biased")
    elif law.dependence == "independent":
        m, q = draw(law, rng, 2 * size)
        m1, m2 = m[:size], m[size:]
        q_prime = law.sample_q(rng, 2 * size)
        result = SymmetrizedDraws(
            m1 * m2,
            q[:size] + m1 * q[size:],
            q_prime[:size] + m1 * q_prime[size:],
            "independent",
        )
    else:
        raise UnsupportedConditioning(f"{law.id} couples M and Q without finite support.")
    result.degenerate = bool(np.all(result.qbar == 0))
    if result.degenerate:
        logger.warning(f"{law.id}: symmetrized block sum is degenerate at 0")
    return result


# --- Maxima ---


@dataclass
class SupFunctionals:
    sup_term: float
    sup_term_index: int
    sup_pi: float
    sup_pi_index: int
    running_term_argmax: np.ndarray = field(repr=False)
    running_pi_argmax: np.ndarray = field(repr=False)


def _running_argmax(values: np.ndarray) -> np.ndarray:
    """Index of the first maximizer of values[:k+1] for every k."""
    previous_best = np.concatenate(([-np.inf], np.maximum.accumulate(values)[:-1]))
    idx = np.where(values > previous_best, np.arange(values.size), 0)
    return np.maximum.accumulate(idx)


def sup_functionals(path: PerpetuityPath) -> SupFunctionals:
    """sup_{n>=1}|Pi_{n-1} Q_n| and sup_{n>=0}|Pi_n| with their first maximizers."""
    if path.n < 1:
        raise ValueError("sup_functionals needs a path of length >= 1.")
    log_terms = path.log_terms()
    log_pi = -path.logpi
    term_idx = _running_argmax(log_terms)
    pi_idx = _running_argmax(log_pi)
    terms = path.abs_pi[:-1] * np.abs(path.q)
    k = int(term_idx[-1])
    j = int(pi_idx[-1])
    return SupFunctionals(float(terms[k]), k + 1, float(path.abs_pi[j]), j, term_idx + 1, pi_idx)


# --- Stopping time T_x and Wald ---


def choose_eta(law: MQLaw, rng: np.random.Generator, pilot: int = ETA_PILOT) -> tuple[float, float]:
    """eta as the pilot 90th percentile of max_{n<=64}|Pi_{n-1}Q_n|, with alpha = P{max <= eta}."""
    m, q = draw(law, rng, pilot * ETA_HORIZON)
    m, q = m.reshape(pilot, ETA_HORIZON), q.reshape(pilot, ETA_HORIZON)
    with np.errstate(under="ignore", over="ignore"):
        pi_before = np.concatenate((np.ones((pilot, 1)), np.cumprod(np.abs(m), axis=1)[:, :-1]), axis=1)
        sups = np.max(pi_before * np.abs(q), axis=1)
    eta = float(np.quantile(sups, ETA_QUANTILE))
    alpha = float(np.mean(sups <= eta))
    if alpha == 0:
        raise BadEta(f"{law.id}: empirical alpha is 0 at eta={eta:g}.")
    return eta, alpha


@dataclass
class WaldReport:
    x: float
    eta: float
    alpha: float
    v_hat: EstimateReport
    s_hat: EstimateReport
    a_value: float
    residual: EstimateReport

    @property
    def residual_value(self) -> float:
        return abs(self.residual.estimate)

    @property
    def passed(self) -> bool:
        return self.residual_value <= 3.0 * self.residual.stderr + 1e-12


def v_function_and_wald(
    law: MQLaw,
    eta: float,
    x: float,
    reps: int,
    rng: np.random.Generator,
    policy: Policy = Policy(),
    alpha: Optional[float] = None,
    evaluator: Optional[AEvaluator] = None,
    seed: int = 0,
) -> WaldReport:
    """T_x = inf{n: S_n >= x or max_{k<=n}|Pi_{k-1}Q_k| > eta}, with S^(x) built from xi ^ x."""
    if x <= 0:
        raise ValueError(f"x must be positive, got {x}.")
    if alpha is not None and alpha == 0:
        raise BadEta(f"{law.id}: empirical alpha is 0 at eta={eta:g}.")
    evaluator = evaluator or a_evaluator(law)
    a_value = float(evaluator.A(x))
    walk = np.zeros(reps)
    capped = np.zeros(reps)
    abs_pi = np.ones(reps)
    stop = np.zeros(reps, dtype=np.int64)
    live = np.ones(reps, dtype=bool)
    taken = 0
    while np.any(live) and taken < policy.nmax:
        active = np.flatnonzero(live)
        m, q = draw(law, rng, active.size * STEP_BLOCK)
        m, q = m.reshape(active.size, STEP_BLOCK), q.reshape(active.size, STEP_BLOCK)
        for j in range(STEP_BLOCK):
            running = live[active]
            idx = active[running]
            if idx.size == 0:
                break
            xi = -np.log(np.abs(m[running, j]))
            with np.errstate(under="ignore", over="ignore"):
                term = abs_pi[idx] * np.abs(q[running, j])
                abs_pi[idx] *= np.abs(m[running, j])
            walk[idx] += xi
            capped[idx] += np.minimum(xi, x)
            stop[idx] = taken + j + 1
            finished = (walk[idx] >= x) | (term > eta)
            live[idx[finished]] = False
        taken += STEP_BLOCK
    if np.any(live):
        raise NonConvergent(f"{law.id}: T_x exceeded nmax={policy.nmax}.", steps=policy.nmax, count=int(live.sum()))
    tag = f"wald:x={x:g}"
    v_hat = report_from_moments(RunningMoments.of(stop), policy.confidence, seed, law.id, tag + ":V")
    s_hat = report_from_moments(RunningMoments.of(capped), policy.confidence, seed, law.id, tag + ":S")
    residual = report_from_moments(
        RunningMoments.of(capped - a_value * stop), policy.confidence, seed, law.id, tag + ":residual"
    )
    return WaldReport(x, eta, alpha if alpha is not None else math.nan, v_hat, s_hat, a_value, residual)
