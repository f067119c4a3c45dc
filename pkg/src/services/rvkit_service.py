import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np

from models import BFunctionSpec
from services.errors import ConcavityViolation, DivisionDegeneracy, NoAdmissibleC
from services.law_service import AEvaluator
from utils.grid_utils import (
    concavity_defect,
    geometric_grid,
    nondecreasing_defect,
    nonincreasing_defect,
    pair_grid,
    tail_grid,
)

logger = logging.getLogger("perpetua.rvkit_service")

C_START = math.e
C_CAP = 1e9
REGULAR_VARIATION_TOL = 0.05
STAR_ALPHAS = tuple(round(0.1 * i, 1) for i in range(1, 10))
PROPERTY_TOL = 1e-9
ROUNDING_ULPS = 4


# --- b functions ---


def _tower(height: int) -> float:
    value = 1.0
    for _ in range(height):
        value = math.exp(value)
    return value


def x_min(spec: BFunctionSpec) -> float:
    """Smallest argument at which every iterated log of the family is defined and nonnegative."""
    if spec.family == "power":
        return 0.0
    if spec.family == "power_log_iter":
        return 0.0 if spec.k == 0 else _tower(spec.k - 1)
    return 1.0


def _iterated_logs(x: np.ndarray, k: int) -> list[np.ndarray]:
    logs = []
    current = x
    for _ in range(k):
        current = np.log(np.maximum(current, 1.0))
        logs.append(current)
    return logs


def eval_b(spec: BFunctionSpec, x):
    """b(x) = x^alpha * l(x), extended by the constant b(x_min) below x_min."""
    x = np.maximum(np.asarray(x, dtype=float), x_min(spec))
    power = x**spec.alpha
    if spec.family == "power":
        out = power
    elif spec.family == "power_log_iter":
        out = power * (_iterated_logs(x, spec.k)[-1] if spec.k else 1.0)
    else:
        log_x = np.log(x)
        out = power * np.exp(spec.beta * log_x**spec.gamma_exp)
    return out if out.ndim else float(out)


def eval_b_prime(spec: BFunctionSpec, x):
    """Right derivative of b; zero on the plateau."""
    raw = np.asarray(x, dtype=float)
    x = np.maximum(raw, x_min(spec))
    with np.errstate(divide="ignore", invalid="ignore"):
        if spec.family == "power":
            out = spec.alpha * x ** (spec.alpha - 1.0)
        elif spec.family == "power_log_iter":
            if spec.k == 0:
                out = spec.alpha * x ** (spec.alpha - 1.0)
            else:
                logs = _iterated_logs(x, spec.k)
                lower = np.prod(logs[:-1], axis=0) if spec.k > 1 else 1.0
                out = spec.alpha * x ** (spec.alpha - 1.0) * logs[-1] + x ** (spec.alpha - 1.0) / lower
        else:
            log_x = np.log(x)
            b = x**spec.alpha * np.exp(spec.beta * log_x**spec.gamma_exp)
            slope = spec.alpha + spec.beta * spec.gamma_exp * log_x ** (spec.gamma_exp - 1.0)
            out = b * slope / x
    out = np.where(raw < x_min(spec), 0.0, out)
    return out if out.ndim else float(out)


def b_handle(spec: BFunctionSpec) -> Callable:
    return functools.partial(eval_b, spec)


# --- Concave surrogates ---


@dataclass(frozen=True)
class ConcaveSurrogate:
    kind: Literal["f", "g"]
    bspec: BFunctionSpec
    c: float

    def shift(self, x):
        """Lambda_c(x) = b(log(c+x)) - b(log c)."""
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        log_c = math.log(self.c)
        return eval_b(self.bspec, log_c + np.log1p(x / self.c)) - eval_b(self.bspec, log_c)

    def value(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        out = np.asarray(self.shift(x))
        if self.kind == "g":
            out = out * np.log(self.c + x)
        return out if out.ndim else float(out)

    def derivative(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        slope = np.asarray(eval_b_prime(self.bspec, np.log(self.c + x))) / (self.c + x)
        if self.kind == "g":
            slope = slope * np.log(self.c + x) + np.asarray(self.shift(x)) / (self.c + x)
        return slope if slope.ndim else float(slope)

    def __call__(self, x):
        return self.value(x)


@dataclass
class SurrogateCertificate:
    kind: str
    c: float
    monotone_defect: float
    concavity_defect: float
    derivative_defect: float
    right_derivative: float
    zero_value: float

    @property
    def worst(self) -> float:
        return max(self.monotone_defect, self.concavity_defect, self.derivative_defect)

    @property
    def passed(self) -> bool:
        return (
            self.worst <= 0
            and self.zero_value == 0.0
            and math.isfinite(self.right_derivative)
            and self.right_derivative > 0
        )


@functools.lru_cache(maxsize=1)
def default_grid() -> np.ndarray:
    return geometric_grid()


def certify_surrogate(surrogate: ConcaveSurrogate, grid: Optional[np.ndarray] = None) -> SurrogateCertificate:
    xs = default_grid() if grid is None else np.asarray(grid, dtype=float)
    values = np.asarray(surrogate.value(xs))
    derivatives = np.asarray(surrogate.derivative(xs))
    # Lambda_c is a difference of two b values near b(log c)
    base = abs(eval_b(surrogate.bspec, math.log(surrogate.c)))
    scale = np.log(surrogate.c + xs) if surrogate.kind == "g" else 1.0
    noise = ROUNDING_ULPS * np.finfo(float).eps * (np.abs(values) + base * scale)
    return SurrogateCertificate(
        kind=surrogate.kind,
        c=surrogate.c,
        monotone_defect=nondecreasing_defect(values),
        concavity_defect=concavity_defect(xs, values, noise=noise),
        derivative_defect=nonincreasing_defect(derivatives) if np.all(np.isfinite(derivatives)) else math.inf,
        right_derivative=float(surrogate.derivative(0.0)),
        zero_value=float(surrogate.value(0.0)),
    )


def make_surrogate(
    spec: BFunctionSpec,
    c: float,
    kind: Literal["f", "g"],
    grid: Optional[np.ndarray] = None,
    certify: bool = True,
) -> ConcaveSurrogate:
    if c <= 0:
        raise ValueError(f"Shift constant c must be positive, got {c}.")
    surrogate = ConcaveSurrogate(kind, spec, float(c))
    if certify:
        certificate = certify_surrogate(surrogate, grid)
        if not certificate.passed:
            raise ConcavityViolation(
                f"{kind}-surrogate of {spec.text()} at c={c:.6g} fails the grid check "
                f"(worst defect {certificate.worst:.3g}).",
                c=c,
                worst=certificate.worst,
            )
    return surrogate


def select_c(spec: BFunctionSpec, grid: Optional[np.ndarray] = None) -> float:
    """Smallest c in {e, 2e, 4e, ...} below C_CAP for which both surrogates certify."""
    if grid is None:
        return _select_c_default(spec)
    return _select_c(spec, np.asarray(grid, dtype=float))


@functools.lru_cache(maxsize=64)
def _select_c_default(spec: BFunctionSpec) -> float:
    return _select_c(spec, default_grid())


def _select_c(spec: BFunctionSpec, grid: np.ndarray) -> float:
    attempts = int(math.floor(math.log2(C_CAP / C_START))) + 1
    c = C_START
    for k in range(attempts):
        c = C_START * 2**k
        try:
            make_surrogate(spec, c, "f", grid)
            make_surrogate(spec, c, "g", grid)
        except ConcavityViolation as exc:
            logger.debug(f"select_c({spec.text()}): {exc.message}")
            continue
        logger.debug(f"select_c({spec.text()}) = {c:.6g}")
        return c
    raise NoAdmissibleC(f"No admissible c below {C_CAP:g} for {spec.text()}.", last_c=c)


# --- phi ---


@dataclass(frozen=True)
class PhiFunction:
    surrogate_g: ConcaveSurrogate
    a_evaluator: AEvaluator = field(compare=False)

    def __post_init__(self):
        if self.surrogate_g.kind != "g":
            raise ValueError("PhiFunction needs a g-surrogate.")

    def __call__(self, x):
        return eval_phi(self, x)


def eval_phi(phi: PhiFunction, x):
    """phi(x) = g(x) / A(log(x+1)), with phi(0) = 0."""
    x = np.asarray(x, dtype=float)
    positive = x > 0
    a = np.asarray(phi.a_evaluator.A(np.log1p(np.where(positive, x, 0.0))), dtype=float)
    if np.any(positive & (a <= 0)):
        raise DivisionDegeneracy(
            f"A(log(x+1)) vanishes for x > 0 under {phi.a_evaluator.law_id}: P{{|M|<1}} = 0."
        )
    g = np.asarray(phi.surrogate_g.value(x))
    out = np.where(positive, g / np.where(positive, a, 1.0), 0.0)
    return out if out.ndim else float(out)


def make_phi(spec: BFunctionSpec, evaluator: AEvaluator, c: Optional[float] = None, certify: bool = True) -> PhiFunction:
    c = select_c(spec) if c is None else c
    return PhiFunction(make_surrogate(spec, c, "g", certify=certify), evaluator)


# --- Property checks ---


@dataclass
class RegularVariationReport:
    y: float
    index: float
    worst: float
    tail_worst: float
    tol: float
    grid_max: float
    dropped: int = 0

    @property
    def passed(self) -> bool:
        return self.tail_worst <= self.tol


def check_regular_variation(
    handle: Callable,
    y: float,
    xs: Optional[np.ndarray] = None,
    index: float = 0.0,
    tol: float = REGULAR_VARIATION_TOL,
) -> RegularVariationReport:
    """Deviation of h(xy)/h(x) from y^index over xs; passes on the top decade."""
    if y <= 1:
        raise ValueError(f"y must exceed 1, got {y}.")
    xs = tail_grid() if xs is None else np.asarray(xs, dtype=float)
    if np.any(np.diff(xs) <= 0):
        raise ValueError("xs must be increasing.")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        ratios = np.asarray(handle(xs * y), dtype=float) / np.asarray(handle(xs), dtype=float)
    deviation = np.abs(ratios - y**index)
    usable = np.isfinite(deviation)
    top = usable & (xs >= xs[usable].max() / 10.0) if np.any(usable) else usable
    return RegularVariationReport(
        y=y,
        index=index,
        worst=float(deviation[usable].max()) if np.any(usable) else math.inf,
        tail_worst=float(deviation[top].max()) if np.any(top) else math.inf,
        tol=tol,
        grid_max=float(xs[usable].max()) if np.any(usable) else math.nan,
        dropped=int((~usable).sum()),
    )


def subadditivity_defect(handle: Callable, per_decade: int = 8) -> float:
    """max over grid pairs of h(x+y) - h(x) - h(y) - tol; <= 0 means subadditive."""
    x, y = pair_grid(per_decade=per_decade)
    lhs = np.asarray(handle(x + y))
    rhs = np.asarray(handle(x)) + np.asarray(handle(y))
    return float(np.max(lhs - rhs - PROPERTY_TOL))


def submultiplicative_constant(surrogate: ConcaveSurrogate, per_decade: int = 8) -> float:
    """Empirical C in f(xy) <= C (f(x) + f(y)) over the pair grid."""
    x, y = pair_grid(per_decade=per_decade)
    denominator = np.asarray(surrogate.value(x)) + np.asarray(surrogate.value(y))
    ratios = np.asarray(surrogate.value(x * y)) / denominator
    return float(np.max(ratios[denominator > 0]))


@dataclass
class SubmultiplicativeReport:
    coarse: float
    fine: float
    tol: float = 0.05

    @property
    def stable(self) -> bool:
        return abs(self.fine - self.coarse) <= self.tol * max(self.coarse, 1.0)


def submultiplicative_report(surrogate: ConcaveSurrogate) -> SubmultiplicativeReport:
    return SubmultiplicativeReport(
        coarse=submultiplicative_constant(surrogate, per_decade=8),
        fine=submultiplicative_constant(surrogate, per_decade=16),
    )


def star_defect(phi: Callable, xs: Optional[np.ndarray] = None, alphas: tuple[float, ...] = STAR_ALPHAS) -> float:
    """max of alpha*phi(x) - phi(alpha*x) - tol; <= 0 means the star inequality holds."""
    xs = geometric_grid(per_decade=8, include_zero=False) if xs is None else np.asarray(xs, dtype=float)
    values = np.asarray(phi(xs))
    worst = -math.inf
    for alpha in alphas:
        worst = max(worst, float(np.max(alpha * values - np.asarray(phi(alpha * xs)) - PROPERTY_TOL)))
    return worst


def asymptotic_ratio(surrogate: ConcaveSurrogate, xs: Optional[np.ndarray] = None) -> float:
    """|b(log x)/f(x) - 1| at the largest grid point."""
    xs = tail_grid() if xs is None else np.asarray(xs, dtype=float)
    top = xs[-1]
    return abs(eval_b(surrogate.bspec, math.log(top)) / float(surrogate.value(top)) - 1.0)
