import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np
from scipy import integrate
from scipy.stats import norm

from models import split_spec_text
from services.errors import Inconclusive, SamplerViolation, ScenarioError, UndefinedJ0

logger = logging.getLogger("perpetua.law_service")

SUPPORT_MASS_TOL = 1e-12
EMPIRICAL_A_POINTS = 512
EMPIRICAL_A_DRAWS = 1_000_000
LADDER_WALKS = 256


@dataclass(frozen=True)
class LawAnalytics:
    """Closed-form facts about a law of (M, Q).

    Expectations of log-parts may be +inf. `survival` is y -> P{-log|M| > y}
    and `a_closed` is the truncated log-moment x -> E min(log^-|M|, x).
    """

    e_log_plus_m: float
    e_log_minus_m: float
    p_m_lt1: float
    p_m_le1: float
    survival: Callable[[float], float]
    a_closed: Optional[Callable] = None
    e_m: Optional[float] = None
    e_q: Optional[float] = None
    dependence: Literal["independent", "coupled"] = "independent"
    j_log_plus_finite: Optional[bool] = None

    @property
    def e_log_abs_m(self) -> float:
        if math.isinf(self.e_log_plus_m) and math.isinf(self.e_log_minus_m):
            return math.nan
        return self.e_log_plus_m - self.e_log_minus_m


class MQLaw:
    """A law of the driver pair (M, Q). Subclasses draw vectorised batches."""

    id: str = "law"
    dependence: Literal["independent", "coupled"] = "independent"

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def sample_q(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.sample(rng, size)[1]

    def sample_log(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Draws of (log|M|, log|Q|) for laws with M, Q > 0."""
        m, q = self.sample(rng, size)
        with np.errstate(divide="ignore"):
            return np.log(np.abs(m)), np.log(np.abs(q))

    def analytics(self) -> Optional[LawAnalytics]:
        return None

    def support(self) -> Optional[list[tuple[tuple[float, float], float]]]:
        return None

    def is_positive(self) -> bool:
        return False

    def fixed_point(self) -> Optional[float]:
        return None

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.id})"


def draw(law: MQLaw, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    m, q = law.sample(rng, size)
    if np.any(m == 0):
        raise SamplerViolation(f"Sampler of {law.id} emitted M = 0.")
    return m, q


def sample_mq(law: MQLaw, rng: np.random.Generator) -> tuple[float, float]:
    m, q = draw(law, rng, 1)
    return float(m[0]), float(q[0])


# --- Finite-support laws ---


class FiniteMQLaw(MQLaw):
    def __init__(self, atoms: list[tuple[float, float, float]], law_id: Optional[str] = None):
        ms = np.array([a[0] for a in atoms], dtype=float)
        qs = np.array([a[1] for a in atoms], dtype=float)
        ps = np.array([a[2] for a in atoms], dtype=float)
        if np.any(ps < 0) or abs(ps.sum() - 1.0) > SUPPORT_MASS_TOL:
            raise ValueError(f"Atom probabilities must be nonnegative and sum to 1, got {ps.sum()!r}.")
        if np.any(ms == 0):
            raise ValueError("Finite-support laws need M != 0 on every atom.")
        if np.all(qs[ps > 0] == 0):
            raise ValueError("Q must not vanish almost surely.")
        self.m_values, self.q_values, self.probs = ms, qs, ps
        self.id = law_id or "finite:" + ";".join(f"{m:g}/{q:g}/{p:g}" for m, q, p in atoms)
        self.dependence = "independent" if len(set(ms)) == 1 or len(set(qs)) == 1 else "coupled"

    def sample(self, rng, size):
        idx = rng.choice(self.probs.size, size=size, p=self.probs)
        return self.m_values[idx], self.q_values[idx]

    def sample_q(self, rng, size):
        if self.dependence != "independent":
            raise ValueError(f"{self.id} couples M and Q; draw pairs instead.")
        return self.sample(rng, size)[1]

    def support(self):
        return [((float(m), float(q)), float(p)) for m, q, p in zip(self.m_values, self.q_values, self.probs)]

    def is_positive(self) -> bool:
        return bool(np.all(self.m_values > 0) and np.all(self.q_values > 0))

    def truncated_log_moment(self, x):
        xi = np.maximum(-np.log(np.abs(self.m_values)), 0.0)
        x = np.asarray(x, dtype=float)
        return np.sum(self.probs * np.minimum(xi, x[..., None]), axis=-1)

    def survival(self, y: float) -> float:
        xi = -np.log(np.abs(self.m_values))
        return float(self.probs[xi > y].sum())

    def analytics(self):
        log_abs = np.log(np.abs(self.m_values))
        return LawAnalytics(
            e_log_plus_m=float(np.sum(self.probs * np.maximum(log_abs, 0.0))),
            e_log_minus_m=float(np.sum(self.probs * np.maximum(-log_abs, 0.0))),
            p_m_lt1=float(self.probs[np.abs(self.m_values) < 1].sum()),
            p_m_le1=float(self.probs[np.abs(self.m_values) <= 1].sum()),
            survival=self.survival,
            a_closed=self.truncated_log_moment,
            e_m=float(np.sum(self.probs * self.m_values)),
            e_q=float(np.sum(self.probs * self.q_values)),
            dependence=self.dependence,
        )

    def fixed_point(self) -> Optional[float]:
        """The c with Q + Mc = c on every atom, if one exists."""
        movable = self.m_values != 1
        if not np.any(movable):
            return 0.0 if np.all(self.q_values == 0) else None
        i = int(np.argmax(movable))
        c = self.q_values[i] / (1.0 - self.m_values[i])
        residual = np.abs(self.q_values + self.m_values * c - c)
        return float(c) if np.all(residual <= 1e-12 * (1 + abs(c))) else None


class ConstLaw(FiniteMQLaw):
    def __init__(self, m: float, q: float):
        super().__init__([(m, q, 1.0)], law_id=f"const:m={m:g},q={q:g}")


class TwoPointLaw(FiniteMQLaw):
    def __init__(self, m1: float, p1: float, m2: float, q: float):
        if not 0 < p1 < 1:
            raise ValueError(f"p1 must lie in (0,1), got {p1}.")
        super().__init__([(m1, q, p1), (m2, q, 1.0 - p1)], law_id=f"twopoint:m1={m1:g},p1={p1:g},m2={m2:g},q={q:g}")


# --- Continuous stock laws ---


class UniformLaw(MQLaw):
    """M ~ Uniform(0,1), Q constant; -log M is standard exponential."""

    def __init__(self, q: float = 1.0):
        self.q = q
        self.id = f"uniform:q={q:g}"

    def sample(self, rng, size):
        # 1 - U lies in (0, 1]
        return 1.0 - rng.random(size), np.full(size, self.q)

    def survival(self, y: float) -> float:
        return math.exp(-y) if y > 0 else 1.0

    def truncated_log_moment(self, x):
        return -np.expm1(-np.maximum(np.asarray(x, dtype=float), 0.0))

    def is_positive(self) -> bool:
        return self.q > 0

    def analytics(self):
        return LawAnalytics(
            e_log_plus_m=0.0,
            e_log_minus_m=1.0,
            p_m_lt1=1.0,
            p_m_le1=1.0,
            survival=self.survival,
            a_closed=self.truncated_log_moment,
            e_m=0.5,
            e_q=self.q,
        )


class LognormalLaw(MQLaw):
    """-log M ~ Normal(mu, sigma), Q constant."""

    def __init__(self, mu: float, sigma: float, q: float = 1.0):
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}.")
        self.mu, self.sigma, self.q = mu, sigma, q
        self.id = f"lognormal:mu={mu:g},sigma={sigma:g},q={q:g}"

    def sample(self, rng, size):
        xi = rng.normal(self.mu, self.sigma, size)
        return np.exp(-xi), np.full(size, self.q)

    def sample_log(self, rng, size):
        xi = rng.normal(self.mu, self.sigma, size)
        return -xi, np.full(size, math.log(abs(self.q)))

    def survival(self, y: float) -> float:
        return float(norm.sf((y - self.mu) / self.sigma))

    def _antiderivative(self, y):
        z = (y - self.mu) / self.sigma
        return (y - self.mu) * norm.sf(z) - self.sigma * norm.pdf(z)

    def truncated_log_moment(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return self._antiderivative(x) - self._antiderivative(0.0)

    def is_positive(self) -> bool:
        return self.q > 0

    def analytics(self):
        z = self.mu / self.sigma
        # E max(xi, 0) and E max(-xi, 0) for xi ~ N(mu, sigma)
        e_plus = self.mu * norm.cdf(z) + self.sigma * norm.pdf(z)
        e_minus = e_plus - self.mu
        return LawAnalytics(
            e_log_plus_m=float(e_minus),
            e_log_minus_m=float(e_plus),
            p_m_lt1=float(norm.cdf(z)),
            p_m_le1=float(norm.cdf(z)),
            survival=self.survival,
            a_closed=self.truncated_log_moment,
            e_m=math.exp(-self.mu + self.sigma**2 / 2),
            e_q=self.q,
        )


class HeavyLadderLaw(MQLaw):
    """-log M ~ Pareto(shape 1/2, scale s), so E log M = -inf."""

    shape = 0.5

    def __init__(self, scale: float = 1.0, q: float = 1.0):
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}.")
        self.scale, self.q = scale, q
        self.id = f"heavyladder:scale={scale:g},q={q:g}"

    def _draw_xi(self, rng, size):
        return self.scale * (1.0 - rng.random(size)) ** (-1.0 / self.shape)

    def sample(self, rng, size):
        return np.exp(-self._draw_xi(rng, size)), np.full(size, self.q)

    def sample_log(self, rng, size):
        return -self._draw_xi(rng, size), np.full(size, math.log(abs(self.q)))

    def survival(self, y: float) -> float:
        return 1.0 if y < self.scale else (self.scale / y) ** self.shape

    def truncated_log_moment(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        s = self.scale
        return np.where(x <= s, x, 2.0 * np.sqrt(s * x) - s)

    def is_positive(self) -> bool:
        return self.q > 0

    def analytics(self):
        e_m, _ = integrate.quad(lambda y: math.exp(-y) * 0.5 * self.scale**0.5 * y**-1.5, self.scale, np.inf)
        return LawAnalytics(
            e_log_plus_m=0.0,
            e_log_minus_m=math.inf,
            p_m_lt1=1.0,
            p_m_le1=1.0,
            survival=self.survival,
            a_closed=self.truncated_log_moment,
            e_m=float(e_m),
            e_q=self.q,
        )


class LogParetoQLaw(MQLaw):
    """M constant, P{log Q > t} = t^-beta for t >= 1."""

    def __init__(self, m: float = 0.5, beta: float = 2.5):
        if not 0 < m < 1:
            raise ValueError(f"m must lie in (0,1), got {m}.")
        if beta <= 0:
            raise ValueError(f"beta must be positive, got {beta}.")
        self.m, self.beta = m, beta
        self.id = f"logpareto_q:m={m:g},beta={beta:g}"

    def draw_log_q(self, rng, size):
        return (1.0 - rng.random(size)) ** (-1.0 / self.beta)

    def sample(self, rng, size):
        with np.errstate(over="ignore"):
            return np.full(size, self.m), np.exp(self.draw_log_q(rng, size))

    def sample_q(self, rng, size):
        return self.sample(rng, size)[1]

    def sample_log(self, rng, size):
        return np.full(size, math.log(self.m)), self.draw_log_q(rng, size)

    def far_log_max(self, rng, size: int, start: int) -> np.ndarray:
        """Largest log-term log(m^(k-1) Q_k) over k > start.

        Uses P{max <= t} = prod_k (1 - (t + (k-1)c)^-beta) with the sum of
        logs replaced by its integral, which inverts in closed form.
        """
        if self.beta <= 1.0:
            raise ScenarioError(f"{self.id}: E log Q is infinite for beta <= 1, so Z_inf diverges.")
        c = -math.log(self.m)
        u = 1.0 - rng.random(size)
        level = (-c * (self.beta - 1.0) * np.log(u)) ** (1.0 / (1.0 - self.beta))
        return np.maximum(level, 1.0) - start * c

    def survival(self, y: float) -> float:
        return 1.0 if -math.log(self.m) > y else 0.0

    def truncated_log_moment(self, x):
        return np.minimum(np.maximum(np.asarray(x, dtype=float), 0.0), -math.log(self.m))

    def is_positive(self) -> bool:
        return True

    def analytics(self):
        return LawAnalytics(
            e_log_plus_m=0.0,
            e_log_minus_m=-math.log(self.m),
            p_m_lt1=1.0,
            p_m_le1=1.0,
            survival=self.survival,
            a_closed=self.truncated_log_moment,
            e_m=self.m,
            e_q=None,
        )


class EricksonLaw(MQLaw):
    """log|M| two-sided Pareto with both log-moments infinite.

    With probability p, log M = s * U^(-1/aplus) (expanding); otherwise
    -log M = s * U^(-1/aminus) (contracting). Pi_n -> 0 iff E J(log+ M) < inf,
    which for these tails holds iff aminus < aplus.
    """

    def __init__(self, p: float = 0.5, aplus: float = 0.6, aminus: float = 0.3, scale: float = 1.0, q: float = 1.0):
        if not 0 < p < 1:
            raise ValueError(f"p must lie in (0,1), got {p}.")
        if not (0 < aplus < 1 and 0 < aminus < 1):
            raise ValueError("Both shapes must lie in (0,1) so that both log-moments diverge.")
        self.p, self.aplus, self.aminus, self.scale, self.q = p, aplus, aminus, scale, q
        self.id = f"erickson:p={p:g},aplus={aplus:g},aminus={aminus:g},scale={scale:g},q={q:g}"

    def sample_log(self, rng, size):
        up = rng.random(size) < self.p
        u = 1.0 - rng.random(size)
        shape = np.where(up, self.aplus, self.aminus)
        magnitude = self.scale * u ** (-1.0 / shape)
        return np.where(up, magnitude, -magnitude), np.full(size, math.log(abs(self.q)))

    def sample(self, rng, size):
        log_m, _ = self.sample_log(rng, size)
        with np.errstate(over="ignore", under="ignore"):
            m = np.exp(log_m)
        # clamp underflow so that M stays nonzero
        m = np.maximum(m, np.finfo(float).tiny)
        return m, np.full(size, self.q)

    def survival(self, y: float) -> float:
        if y < 0:
            return 1.0 - self.p if y > -self.scale else 1.0 - self.p * (self.scale / -y) ** self.aplus
        return (1.0 - self.p) * (1.0 if y < self.scale else (self.scale / y) ** self.aminus)

    def truncated_log_moment(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        s, a = self.scale, self.aminus
        head = x
        tail = s + s**a * (x ** (1 - a) - s ** (1 - a)) / (1 - a)
        return (1.0 - self.p) * np.where(x <= s, head, tail)

    def is_positive(self) -> bool:
        return self.q > 0

    def analytics(self):
        return LawAnalytics(
            e_log_plus_m=math.inf,
            e_log_minus_m=math.inf,
            p_m_lt1=1.0 - self.p,
            p_m_le1=1.0 - self.p,
            survival=self.survival,
            a_closed=self.truncated_log_moment,
            e_m=None,
            e_q=self.q,
            j_log_plus_finite=self.aminus < self.aplus,
        )


# --- Text forms ---


def _floats(params: dict[str, str], names: list[str], defaults: dict[str, float]) -> dict[str, float]:
    unknown = set(params) - set(names)
    if unknown:
        raise ValueError(f"Unknown parameters {sorted(unknown)}; expected {names}.")
    values = dict(defaults)
    for key, raw in params.items():
        try:
            values[key] = float(raw)
        except ValueError as exc:
            raise ValueError(f"Parameter {key}={raw} is not a number.") from exc
    missing = [n for n in names if n not in values]
    if missing:
        raise ValueError(f"Missing parameters {missing}.")
    return values


def _parse_finite(params: dict[str, str]) -> FiniteMQLaw:
    unknown = set(params) - {"m", "q", "p"}
    if unknown or not {"m", "q", "p"} <= set(params):
        raise ValueError("finite laws need m=a/b/..,q=a/b/..,p=a/b/..")
    columns = [[float(v) for v in params[key].split("/")] for key in ("m", "q", "p")]
    if len({len(col) for col in columns}) != 1:
        raise ValueError("finite law columns m, q and p must have equal length.")
    return FiniteMQLaw(list(zip(*columns)))


MQ_LAW_FORMS = {
    "const": "const:m=0.5,q=1",
    "twopoint": "twopoint:m1=2,p1=0.5,m2=0.125,q=1",
    "finite": "finite:m=0.5/0.5,q=1/2,p=0.5/0.5",
    "uniform": "uniform:q=1",
    "lognormal": "lognormal:mu=0.5,sigma=1,q=1",
    "heavyladder": "heavyladder:scale=1,q=1",
    "logpareto_q": "logpareto_q:m=0.5,beta=2.5",
    "erickson": "erickson:p=0.5,aplus=0.6,aminus=0.3,scale=1,q=1",
}


def parse_mq_law(text: str) -> MQLaw:
    name, params = split_spec_text(text)
    if name == "const":
        v = _floats(params, ["m", "q"], {"q": 1.0})
        return ConstLaw(v["m"], v["q"])
    if name == "twopoint":
        v = _floats(params, ["m1", "p1", "m2", "q"], {"q": 1.0})
        return TwoPointLaw(v["m1"], v["p1"], v["m2"], v["q"])
    if name == "finite":
        return _parse_finite(params)
    if name == "uniform":
        return UniformLaw(**_floats(params, ["q"], {"q": 1.0}))
    if name == "lognormal":
        return LognormalLaw(**_floats(params, ["mu", "sigma", "q"], {"q": 1.0}))
    if name == "heavyladder":
        return HeavyLadderLaw(**_floats(params, ["scale", "q"], {"scale": 1.0, "q": 1.0}))
    if name == "logpareto_q":
        return LogParetoQLaw(**_floats(params, ["m", "beta"], {"m": 0.5}))
    if name == "erickson":
        return EricksonLaw(
            **_floats(
                params,
                ["p", "aplus", "aminus", "scale", "q"],
                {"p": 0.5, "aplus": 0.6, "aminus": 0.3, "scale": 1.0, "q": 1.0},
            )
        )
    raise ValueError(f"Unknown (M,Q) law '{name}'.")


# --- A and J ---


@dataclass(frozen=True)
class AEvaluator:
    mode: Literal["closed_form", "empirical"]
    p_m_lt1: float
    law_id: str = ""
    a_function: Optional[Callable] = None
    grid: Optional[np.ndarray] = field(default=None, compare=False)
    values: Optional[np.ndarray] = field(default=None, compare=False)
    sample_size: int = 0

    def A(self, x):
        x = np.asarray(x, dtype=float)
        xp = np.maximum(x, 0.0)
        if self.mode == "closed_form":
            out = np.asarray(self.a_function(xp), dtype=float)
        else:
            out = np.interp(xp, self.grid, self.values)
        out = np.where(x <= 0, 0.0, out)
        return out if out.ndim else float(out)

    def J(self, x):
        x = np.asarray(x, dtype=float)
        if self.p_m_lt1 <= 0:
            raise UndefinedJ0(f"J is undefined for {self.law_id}: P{{|M|<1}} = 0.")
        a = np.asarray(self.A(np.maximum(x, 0.0)), dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(a > 0, x / np.where(a > 0, a, 1.0), np.inf)
        out = np.where(x < 0, 0.0, np.where(x == 0, 1.0 / self.p_m_lt1, ratio))
        return out if out.ndim else float(out)


def _quad_a(survival: Callable[[float], float]):
    def a_function(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.array([integrate.quad(survival, 0.0, xi, limit=200)[0] if xi > 0 else 0.0 for xi in x.ravel()])
        return out.reshape(x.shape)

    return a_function


def a_evaluator(law: MQLaw) -> AEvaluator:
    analytics = law.analytics()
    if analytics is None:
        raise ValueError(f"{law.id} has no analytics; build an empirical evaluator instead.")
    a_function = analytics.a_closed or _quad_a(analytics.survival)
    return AEvaluator("closed_form", analytics.p_m_lt1, law.id, a_function)


def empirical_a_evaluator(
    neg_log_m: np.ndarray,
    weights: Optional[np.ndarray] = None,
    points: int = EMPIRICAL_A_POINTS,
    law_id: str = "",
) -> AEvaluator:
    """Piecewise-linear A from draws of -log|M| (optionally weighted)."""
    xi = np.maximum(np.asarray(neg_log_m, dtype=float), 0.0)
    w = np.ones_like(xi) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    order = np.argsort(xi)
    xi, w = xi[order], w[order]
    top = float(xi[-1]) if xi.size else 0.0
    grid = np.linspace(0.0, max(top, 1e-12), points)
    cum_mass = np.concatenate(([0.0], np.cumsum(w)))
    cum_first = np.concatenate(([0.0], np.cumsum(w * xi)))
    idx = np.searchsorted(xi, grid, side="left")
    values = cum_first[idx] + grid * (1.0 - cum_mass[idx])
    p_lt1 = float(w[xi > 0].sum())
    return AEvaluator("empirical", p_lt1, law_id, None, grid, values, int(xi.size))


def eval_A(evaluator: AEvaluator, x: float) -> float:
    return evaluator.A(x)


def eval_J(evaluator: AEvaluator, x: float) -> float:
    return evaluator.J(x)


# --- Regime classification ---


@dataclass
class RegimeReport:
    case: Literal["C1", "C2", "divergent"]
    subcase: Literal["A1", "A2", "A3", "none"]
    evidence: dict
    empirical: bool = False


def _subcase(e_plus: float, e_minus: float) -> str:
    if math.isinf(e_plus) and math.isinf(e_minus):
        return "A3"
    if math.isinf(e_minus):
        return "A2"
    return "A1"


def classify_regime(law: MQLaw, budget: int = 0, rng: Optional[np.random.Generator] = None) -> RegimeReport:
    analytics = law.analytics()
    if analytics is not None:
        return _classify_closed_form(law, analytics, budget, rng)
    if budget <= 0 or rng is None:
        raise ValueError(f"{law.id} has no analytics; a sampling budget and rng are required.")
    return _classify_empirical(law, budget, rng)


def _classify_closed_form(law, analytics: LawAnalytics, budget, rng) -> RegimeReport:
    e_plus, e_minus = analytics.e_log_plus_m, analytics.e_log_minus_m
    evidence = {
        "e_log_abs_m": analytics.e_log_abs_m,
        "p_m_lt1": analytics.p_m_lt1,
        "p_m_le1": analytics.p_m_le1,
    }
    if analytics.p_m_le1 >= 1.0 - SUPPORT_MASS_TOL:
        if analytics.p_m_lt1 <= 0:
            return RegimeReport("divergent", "none", evidence)
        return RegimeReport("C1", _subcase(e_plus, e_minus), evidence)

    if math.isinf(e_plus) and math.isinf(e_minus):
        if analytics.j_log_plus_finite is None:
            if budget <= 0 or rng is None:
                raise Inconclusive(f"{law.id}: both log-moments infinite and no J-moment fact.", evidence)
            report = _classify_empirical(law, budget, rng)
            report.subcase = "A3" if report.case != "divergent" else "none"
            return report
        to_zero = analytics.j_log_plus_finite
        evidence["j_log_plus_finite"] = to_zero
    else:
        to_zero = e_minus > e_plus
    if not to_zero:
        return RegimeReport("divergent", "none", evidence)
    return RegimeReport("C2", _subcase(e_plus, e_minus), evidence)


def _classify_empirical(law: MQLaw, budget: int, rng: np.random.Generator) -> RegimeReport:
    """Ladder-height evidence from simulated walks of log|Pi_n|; never a proof."""
    steps = max(budget // LADDER_WALKS, 1)
    log_m, _ = law.sample_log(rng, LADDER_WALKS * steps)
    log_m = log_m.reshape(LADDER_WALKS, steps)
    walks = np.cumsum(log_m, axis=1)
    mean = float(log_m.mean())
    stderr = float(log_m.std(ddof=1) / math.sqrt(log_m.size)) if log_m.size > 1 else math.inf
    half = max(steps // 2, 1)
    evidence = {
        "mean_log_abs_m": mean,
        "stderr": stderr,
        "p_m_gt1_hat": float(np.mean(log_m > 0)),
        "p_m_lt1_hat": float(np.mean(log_m < 0)),
        "ladder_reached": float(np.mean(np.any(walks <= 0, axis=1))),
        "median_walk_half": float(np.median(walks[:, half - 1])),
        "median_walk_end": float(np.median(walks[:, -1])),
    }
    if evidence["p_m_gt1_hat"] == 0 and evidence["p_m_lt1_hat"] > 0:
        return RegimeReport("C1", "none", evidence, empirical=True)
    drifting_down = evidence["median_walk_end"] < evidence["median_walk_half"] < 0
    drifting_up = evidence["median_walk_end"] > evidence["median_walk_half"] > 0
    if mean + 3 * stderr < 0 or (drifting_down and not mean - 3 * stderr > 0):
        return RegimeReport("C2", "none", evidence, empirical=True)
    if mean - 3 * stderr > 0 or drifting_up:
        return RegimeReport("divergent", "none", evidence, empirical=True)
    raise Inconclusive(f"{law.id}: ladder evidence is ambiguous within {budget} draws.", evidence)
