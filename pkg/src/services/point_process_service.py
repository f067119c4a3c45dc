import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from scipy import integrate
from scipy.stats import poisson

from models import EstimateReport, split_spec_text
from services.errors import DegenerateBRW, NotEnumerable, UnboundedDensity, UnsupportedTilting
from services.law_service import AEvaluator, ConstLaw, FiniteMQLaw, a_evaluator, empirical_a_evaluator
from services.stats_service import ExactLaw, exact_report, mc_mean

logger = logging.getLogger("perpetua.point_process_service")

ENUMERATION_TAIL = 1e-12
SBPARETO_TERMS = 1_000_000
MIN_M_GAMMA_SAMPLES = 100


@dataclass
class OffspringBatch:
    """Children of `counts.size` parents, flattened in parent order.

    `tilts` holds e^{gamma X} for every child.
    """

    counts: np.ndarray
    displacements: np.ndarray
    tilts: np.ndarray

    @property
    def parents(self) -> np.ndarray:
        return np.repeat(np.arange(self.counts.size), self.counts)


class PointProcessLaw:
    id: str = "pp"
    gamma: float = 1.0
    density_bound: Optional[float] = None

    def sample_batch(self, rng: np.random.Generator, count: int) -> OffspringBatch:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.sample_batch(rng, 1).displacements

    def enumerate(self) -> Optional[list[tuple[tuple[float, ...], float]]]:
        return None

    @property
    def m_gamma(self) -> float:
        raise NotImplementedError

    def mean_offspring(self) -> float:
        raise NotImplementedError

    def constant_displacement(self) -> Optional[float]:
        return None

    def is_enumerable(self) -> bool:
        return self.enumerate() is not None

    def is_supercritical(self) -> bool:
        return self.mean_offspring() > 1.0

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.id})"


def require_supercritical(pp: PointProcessLaw) -> None:
    if not pp.is_supercritical():
        raise DegenerateBRW(f"{pp.id} is not supercritical: E N = {pp.mean_offspring():g}.")


# --- Finite-configuration laws ---


class FinitePointProcess(PointProcessLaw):
    def __init__(
        self,
        configs: list[tuple[float, ...]],
        probs: list[float],
        gamma: float = 1.0,
        law_id: Optional[str] = None,
        tilts: Optional[list[tuple[float, ...]]] = None,
    ):
        if gamma <= 0:
            raise ValueError(f"gamma must be positive, got {gamma}.")
        probs = np.asarray(probs, dtype=float)
        if len(configs) != probs.size or np.any(probs < 0) or abs(probs.sum() - 1.0) > ENUMERATION_TAIL:
            raise ValueError("Configuration probabilities must be nonnegative and sum to 1.")
        self.configs = [tuple(float(x) for x in c) for c in configs]
        self.probs = probs
        self.gamma = float(gamma)
        self.sizes = np.array([len(c) for c in self.configs], dtype=np.int64)
        width = max(int(self.sizes.max()), 1)
        self.displacements = np.zeros((len(configs), width))
        self.tilt_matrix = np.zeros((len(configs), width))
        for i, config in enumerate(self.configs):
            self.displacements[i, : len(config)] = config
            if tilts is None:
                self.tilt_matrix[i, : len(config)] = np.exp(self.gamma * np.asarray(config))
            else:
                self.tilt_matrix[i, : len(config)] = tilts[i]
        self.config_tilts = self.tilt_matrix.sum(axis=1)
        self.density_bound = float(self.config_tilts.max())
        self.id = law_id or "finitepp:" + ";".join(
            "/".join(f"{x:g}" for x in c) + f"@{p:g}" for c, p in zip(self.configs, probs)
        )

    def sample_config_indices(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.choice(len(self.configs), size=count, p=self.probs)

    def batch_from_indices(self, idx: np.ndarray) -> OffspringBatch:
        counts = self.sizes[idx]
        mask = np.arange(self.displacements.shape[1])[None, :] < counts[:, None]
        return OffspringBatch(counts, self.displacements[idx][mask], self.tilt_matrix[idx][mask])

    def sample_batch(self, rng, count):
        return self.batch_from_indices(self.sample_config_indices(rng, count))

    def enumerate(self):
        return list(zip(self.configs, self.probs.tolist()))

    @property
    def m_gamma(self) -> float:
        return math.fsum(self.probs * self.config_tilts)

    def mean_offspring(self) -> float:
        return float(np.sum(self.probs * self.sizes))

    def constant_displacement(self) -> Optional[float]:
        values = {x for c in self.configs for x in c}
        return values.pop() if len(values) == 1 else None


class GaltonWatsonLaw(FinitePointProcess):
    """N = nmin w.p. p and nmax otherwise, every child displaced by x."""

    def __init__(self, nmin: int, nmax: int, p: float, x: float = 0.0, gamma: float = 1.0):
        if nmin < 0 or nmax < nmin:
            raise ValueError(f"Need 0 <= nmin <= nmax, got {nmin}, {nmax}.")
        if not 0 <= p <= 1:
            raise ValueError(f"p must lie in [0,1], got {p}.")
        configs = [(x,) * nmin, (x,) * nmax] if nmin != nmax else [(x,) * nmin]
        probs = [p, 1.0 - p] if nmin != nmax else [1.0]
        law_id = f"gw:nmin={nmin},nmax={nmax},p={p:g},x={x:g},gamma={gamma:g}"
        super().__init__(configs, probs, gamma, law_id)


class BinaryLaw(FinitePointProcess):
    """Two children displaced by log(1/2)/gamma; every child weight is exactly 1/2."""

    def __init__(self, gamma: float = 1.0):
        x = math.log(0.5) / gamma
        super().__init__([(x, x)], [1.0], gamma, f"binary:gamma={gamma:g}", tilts=[(0.5, 0.5)])


class PoissonLaw(PointProcessLaw):
    def __init__(self, lam: float, x: float = 0.0, gamma: float = 1.0):
        if lam <= 1:
            raise ValueError(f"Poisson mean must exceed 1 for supercriticality, got {lam}.")
        self.lam, self.x, self.gamma = lam, x, gamma
        self.tilt = math.exp(gamma * x)
        self.id = f"poisson:lambda={lam:g},x={x:g},gamma={gamma:g}"

    def sample_batch(self, rng, count):
        counts = rng.poisson(self.lam, count).astype(np.int64)
        total = int(counts.sum())
        return OffspringBatch(counts, np.full(total, self.x), np.full(total, self.tilt))

    def truncation(self) -> int:
        return int(poisson.isf(ENUMERATION_TAIL / 10.0, self.lam)) + 1

    def enumerate(self):
        ks = np.arange(self.truncation() + 1)
        probs = poisson.pmf(ks, self.lam)
        probs = probs / probs.sum()
        return [((self.x,) * int(k), float(p)) for k, p in zip(ks, probs)]

    @property
    def m_gamma(self) -> float:
        return self.lam * self.tilt

    def mean_offspring(self) -> float:
        return self.lam

    def constant_displacement(self) -> Optional[float]:
        return self.x


class SizeBiasedParetoLaw(PointProcessLaw):
    """X = 0 and a size-biased offspring count N* = ceil(e^L) with P{L > t} = t^-beta, t >= 1.

    The offspring law under P is P{N = k} proportional to P{N* = k}/k. It is
    drawn by rejection from N* with acceptance 3/N*, since N* >= 3.
    """

    def __init__(self, beta: float, gamma: float = 1.0):
        if beta <= 0:
            raise ValueError(f"beta must be positive, got {beta}.")
        self.beta, self.gamma = beta, gamma
        self.id = f"sbpareto:beta={beta:g}"
        self._m = 1.0 / self._inverse_biased_mean()

    def _survival(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t < 1.0, 1.0, np.maximum(t, 1.0) ** -self.beta)

    def _inverse_biased_mean(self) -> float:
        ks = np.arange(3, SBPARETO_TERMS + 1, dtype=float)
        pmf = self._survival(np.log(ks - 1.0)) - self._survival(np.log(ks))
        head = math.fsum(pmf / ks)
        # E[e^-L; L > log K] approximates the remaining sum
        lower = math.log(SBPARETO_TERMS)
        tail, _ = integrate.quad(lambda t: math.exp(-t) * self.beta * t ** (-self.beta - 1.0), lower, np.inf)
        return head + tail

    def sample_biased_counts(self, rng: np.random.Generator, count: int) -> np.ndarray:
        level = (1.0 - rng.random(count)) ** (-1.0 / self.beta)
        with np.errstate(over="ignore"):
            return np.ceil(np.exp(level))

    def sample_counts(self, rng: np.random.Generator, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        filled = 0
        while filled < count:
            need = count - filled
            proposal = self.sample_biased_counts(rng, 2 * need + 16)
            accept = rng.random(proposal.size) < 3.0 / proposal
            taken = proposal[accept][:need]
            out[filled : filled + taken.size] = taken.astype(np.int64)
            filled += taken.size
        return out

    def sample_batch(self, rng, count):
        counts = self.sample_counts(rng, count)
        total = int(counts.sum())
        return OffspringBatch(counts, np.zeros(total), np.ones(total))

    def sample_w1_hat(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Exact draws of the size-biased W_1 = N*/m (may be +inf)."""
        return self.sample_biased_counts(rng, size) / self._m

    def sample_log_w1_hat(self, rng: np.random.Generator, size: int) -> np.ndarray:
        level = (1.0 - rng.random(size)) ** (-1.0 / self.beta)
        # log ceil(e^L) = L + log1p(frac/e^L) is L to double precision once e^L is large
        with np.errstate(over="ignore"):
            exact = np.log(np.ceil(np.exp(np.minimum(level, 700.0))))
        return np.where(level < 700.0, exact, level) - math.log(self._m)

    @property
    def m_gamma(self) -> float:
        return self._m

    def mean_offspring(self) -> float:
        return self._m

    def constant_displacement(self) -> Optional[float]:
        return 0.0


class SizeBiasedParetoTilted(PointProcessLaw):
    """The tilted law of SizeBiasedParetoLaw: N* children at 0."""

    def __init__(self, base: SizeBiasedParetoLaw):
        self.base = base
        self.gamma = base.gamma
        self.id = f"tilt({base.id})"

    def sample_batch(self, rng, count):
        counts = self.base.sample_biased_counts(rng, count)
        if np.any(~np.isfinite(counts)):
            raise UnsupportedTilting(f"{self.id} drew an offspring count beyond float range.")
        counts = counts.astype(np.int64)
        total = int(counts.sum())
        return OffspringBatch(counts, np.zeros(total), np.ones(total))

    @property
    def m_gamma(self) -> float:
        return self.base.m_gamma

    def mean_offspring(self) -> float:
        configs = self.base.enumerate()
        if configs is None:
            return math.inf
        weighted, m = _weights(self.base)
        return math.fsum(p * len(c) * math.fsum(w) for (c, _), (w, p) in zip(configs, weighted))


# --- Text forms ---

POINT_PROCESS_FORMS = {
    "gw": "gw:nmin=1,nmax=2,p=0.5,x=0,gamma=1",
    "binary": "binary:gamma=1",
    "poisson": "poisson:lambda=2,x=0,gamma=1",
    "sbpareto": "sbpareto:beta=2",
}


def parse_point_process(text: str) -> PointProcessLaw:
    name, params = split_spec_text(text)
    try:
        if name == "gw":
            allowed = {"nmin", "nmax", "p", "x", "gamma"}
            _check_keys(params, allowed, required={"nmin", "nmax", "p"})
            return GaltonWatsonLaw(
                int(params["nmin"]),
                int(params["nmax"]),
                float(params["p"]),
                float(params.get("x", 0.0)),
                float(params.get("gamma", 1.0)),
            )
        if name == "binary":
            _check_keys(params, {"gamma"})
            return BinaryLaw(float(params.get("gamma", 1.0)))
        if name == "poisson":
            _check_keys(params, {"lambda", "x", "gamma"}, required={"lambda"})
            return PoissonLaw(float(params["lambda"]), float(params.get("x", 0.0)), float(params.get("gamma", 1.0)))
        if name == "sbpareto":
            _check_keys(params, {"beta", "gamma"}, required={"beta"})
            return SizeBiasedParetoLaw(float(params["beta"]), float(params.get("gamma", 1.0)))
    except (TypeError, KeyError) as exc:
        raise ValueError(f"Malformed point-process text '{text}': {exc}") from exc
    raise ValueError(f"Unknown point-process law '{name}'.")


def _check_keys(params: dict, allowed: set, required: set = frozenset()) -> None:
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"Unknown parameters {sorted(unknown)}; expected {sorted(allowed)}.")
    missing = set(required) - set(params)
    if missing:
        raise ValueError(f"Missing parameters {sorted(missing)}.")


# --- Induced and tilted laws ---


def _weights(pp: PointProcessLaw) -> tuple[list, float]:
    configs = pp.enumerate()
    if configs is None:
        raise NotEnumerable(f"{pp.id} has no finite enumeration.")
    if isinstance(pp, FinitePointProcess):
        tilts = [pp.tilt_matrix[i, : len(c)] for i, (c, _) in enumerate(configs)]
    else:
        tilts = [np.exp(pp.gamma * np.asarray(c, dtype=float)) for c, _ in configs]
    m = math.fsum(p * float(np.sum(t)) for (_, p), t in zip(configs, tilts))
    return [(t / m, p) for (_, p), t in zip(configs, tilts)], m


def induced_M_law(pp: PointProcessLaw) -> FiniteMQLaw:
    """Joint spine law of (M, Q): mass p * L_i at (L_i, sum_j L_j) for every child i of every configuration."""
    weighted, _ = _weights(pp)
    masses: dict[tuple[float, float], float] = {}
    for weights, p in weighted:
        if p == 0 or weights.size == 0:
            continue
        q = math.fsum(weights)
        for weight in weights:
            key = (float(weight), q)
            masses[key] = masses.get(key, 0.0) + p * float(weight)
    atoms = [(m, q, mass) for (m, q), mass in sorted(masses.items())]
    total = math.fsum(a[2] for a in atoms)
    if abs(total - 1.0) > 1e-10:
        raise ValueError(f"Induced masses of {pp.id} sum to {total}, not E W_1 = 1.")
    atoms = [(m, q, mass / total) for m, q, mass in atoms]
    if all(m == 1.0 for m, _, _ in atoms):
        raise DegenerateBRW(f"Induced M-law of {pp.id} is the point mass at 1.")
    return FiniteMQLaw(atoms, law_id=f"induced({pp.id})")


def induced_Q_and_W1_law(pp: PointProcessLaw) -> tuple[ExactLaw, ExactLaw]:
    """(law of W_1, law of Q) with q_mass(x) = x * w1_mass(x)."""
    weighted, _ = _weights(pp)
    values = np.array([math.fsum(w) for w, _ in weighted])
    probs = np.array([p for _, p in weighted])
    w1 = ExactLaw.from_pairs(values, probs)
    q = ExactLaw(w1.values.copy(), w1.values * w1.probs)
    if np.any(q.values <= 0):
        # W_1 = 0 atoms (extinction after one step) carry no Q-mass
        keep = q.values > 0
        q = ExactLaw(q.values[keep], q.probs[keep])
    return w1, q


@dataclass
class InducedMSample:
    """Monte Carlo M-marginal: child weights L_i, each carrying mass L_i / (number of parents)."""

    values: np.ndarray
    weights: np.ndarray
    law_id: str

    def a_evaluator(self) -> AEvaluator:
        return empirical_a_evaluator(-np.log(self.values), self.weights, law_id=self.law_id)

    def mean_log(self) -> float:
        return float(np.sum(self.weights * np.log(self.values)) / np.sum(self.weights))


def induced_M_sample(pp: PointProcessLaw, rng: np.random.Generator, parents: int = 100_000) -> InducedMSample:
    batch = pp.sample_batch(rng, parents)
    weights = batch.tilts / pp.m_gamma
    return InducedMSample(weights, weights / parents, f"induced({pp.id})")


def induced_m_evaluator(pp: PointProcessLaw, rng: Optional[np.random.Generator] = None) -> AEvaluator:
    """A-evaluator of the induced M-law: exact when enumerable or displacements are constant."""
    constant = pp.constant_displacement()
    if pp.is_enumerable():
        return a_evaluator(induced_M_law(pp))
    if constant is not None:
        return a_evaluator(ConstLaw(math.exp(pp.gamma * constant) / pp.m_gamma, 1.0))
    if rng is None:
        raise NotEnumerable(f"{pp.id} needs an rng for the empirical induced M-law.")
    return induced_M_sample(pp, rng).a_evaluator()


class ImportanceTiltedLaw(PointProcessLaw):
    """Configurations drawn from the untilted law; each carries weight sum(e^{gamma X})/m."""

    mode = "importance"

    def __init__(self, base: PointProcessLaw):
        self.base = base
        self.gamma = base.gamma
        self.id = f"tilt-importance({base.id})"

    def sample_batch(self, rng, count):
        return self.base.sample_batch(rng, count)

    def config_weights(self, batch: OffspringBatch) -> np.ndarray:
        sums = np.bincount(batch.parents, weights=batch.tilts, minlength=batch.counts.size)
        return sums / self.base.m_gamma

    @property
    def m_gamma(self) -> float:
        return self.base.m_gamma

    def mean_offspring(self) -> float:
        return self.base.mean_offspring()


class RejectionTiltedLaw(PointProcessLaw):
    mode = "rejection"

    def __init__(self, base: PointProcessLaw, bound: float):
        self.base, self.bound = base, bound
        self.gamma = base.gamma
        self.id = f"tilt-rejection({base.id})"

    def sample_batch(self, rng, count):
        kept_counts, kept_disp, kept_tilts = [], [], []
        accepted = 0
        while accepted < count:
            batch = self.base.sample_batch(rng, count)
            sums = np.bincount(batch.parents, weights=batch.tilts, minlength=batch.counts.size)
            if np.any(sums > self.bound * (1 + 1e-12)):
                raise UnboundedDensity(f"Declared bound {self.bound:g} exceeded by {self.base.id}.")
            accept = rng.random(batch.counts.size) < sums / self.bound
            accept[np.flatnonzero(accept)[count - accepted :]] = False
            child_mask = np.repeat(accept, batch.counts)
            kept_counts.append(batch.counts[accept])
            kept_disp.append(batch.displacements[child_mask])
            kept_tilts.append(batch.tilts[child_mask])
            accepted += int(accept.sum())
        return OffspringBatch(np.concatenate(kept_counts), np.concatenate(kept_disp), np.concatenate(kept_tilts))

    @property
    def m_gamma(self) -> float:
        return self.base.m_gamma

    def mean_offspring(self) -> float:
        if not self.base.is_enumerable():
            return math.inf
        weighted, _ = _weights(self.base)
        return math.fsum(p * w.size * math.fsum(w) for w, p in weighted)


def tilted_reproduction_law(
    pp: PointProcessLaw,
    mode: Literal["exact", "rejection", "importance"] = "exact",
) -> PointProcessLaw:
    if mode == "exact":
        if isinstance(pp, SizeBiasedParetoLaw):
            return SizeBiasedParetoTilted(pp)
        weighted, m = _weights(pp)
        configs = pp.enumerate()
        probs = np.array([p * math.fsum(w) for w, p in weighted])
        probs = probs / probs.sum()
        tilts = [tuple(w * m) for w, _ in weighted]
        return FinitePointProcess([c for c, _ in configs], probs.tolist(), pp.gamma, f"tilt({pp.id})", tilts=tilts)
    if mode == "rejection":
        if pp.density_bound is None:
            raise UnboundedDensity(f"{pp.id} declares no a.s. bound on sum e^(gamma X).")
        return RejectionTiltedLaw(pp, pp.density_bound)
    if mode == "importance":
        return ImportanceTiltedLaw(pp)
    raise ValueError(f"Unknown tilting mode '{mode}'.")


def estimate_m_gamma(
    pp: PointProcessLaw,
    gamma: float,
    n: int,
    rng: np.random.Generator,
    confidence: float = 0.99,
    seed: int = 0,
) -> EstimateReport:
    if n < MIN_M_GAMMA_SAMPLES:
        raise ValueError(f"estimate_m_gamma needs n >= {MIN_M_GAMMA_SAMPLES}, got {n}.")
    configs = pp.enumerate()
    if configs is not None:
        if gamma == pp.gamma and isinstance(pp, FinitePointProcess):
            value = pp.m_gamma
        else:
            value = math.fsum(p * float(np.sum(np.exp(gamma * np.asarray(c, dtype=float)))) for c, p in configs)
        return exact_report(value, n, seed, pp.id, "m_gamma")

    def sampler(generator, size):
        batch = pp.sample_batch(generator, size)
        tilts = np.exp(gamma * batch.displacements)
        return np.bincount(batch.parents, weights=tilts, minlength=size)

    return mc_mean(sampler, n, rng, confidence, seed, pp.id, "m_gamma")
