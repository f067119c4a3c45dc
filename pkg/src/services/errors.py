def _rebuild(cls, message: str, state: dict):
    error = cls.__new__(cls)
    Exception.__init__(error, message)
    error.__dict__.update(state)
    return error


class PerpetuaError(Exception):
    code = "perpetua_error"

    def __init__(self, message: str, code: str | None = None):
        self.code = code or self.code
        self.message = message
        super().__init__(self.message)

    def __reduce__(self):
        # subclasses take extra constructor arguments; rebuild from state in worker results
        return _rebuild, (type(self), self.message, dict(self.__dict__))


# --- rvkit ---


class ConcavityViolation(PerpetuaError):
    code = "concavity_violation"

    def __init__(self, message: str, c: float, worst: float):
        self.c = c
        self.worst = worst
        super().__init__(message)


class NoAdmissibleC(PerpetuaError):
    code = "no_admissible_c"

    def __init__(self, message: str, last_c: float):
        self.last_c = last_c
        super().__init__(message)


class DivisionDegeneracy(PerpetuaError):
    code = "division_degeneracy"


# --- laws ---


class SamplerViolation(PerpetuaError):
    code = "sampler_violation"


class Inconclusive(PerpetuaError):
    code = "inconclusive"

    def __init__(self, message: str, evidence: dict):
        self.evidence = evidence
        super().__init__(message)


class UndefinedJ0(PerpetuaError):
    code = "undefined_j0"


class DegenerateBRW(PerpetuaError):
    code = "degenerate_brw"


class NotEnumerable(PerpetuaError):
    code = "not_enumerable"


class UnboundedDensity(PerpetuaError):
    code = "unbounded_density"


# --- perpetuities ---


class NonConvergent(PerpetuaError):
    code = "non_convergent"

    def __init__(self, message: str, steps: int, count: int = 1, growth_flag: bool = False):
        self.steps = steps
        self.count = count
        self.growth_flag = growth_flag
        super().__init__(message)


class UnsupportedConditioning(PerpetuaError):
    code = "unsupported_conditioning"


class BadEta(PerpetuaError):
    code = "bad_eta"


# --- branching ---


class PopulationExplosion(PerpetuaError):
    code = "population_explosion"

    def __init__(self, message: str, partial: list[float] | None = None, population: int = 0):
        self.partial = partial or []
        self.population = population
        super().__init__(message)


class Extinct(PerpetuaError):
    code = "extinct"


class UnsupportedTilting(PerpetuaError):
    code = "unsupported_tilting"


# --- oracles ---


class SupportExplosion(PerpetuaError):
    code = "support_explosion"

    def __init__(self, message: str, size: int):
        self.size = size
        super().__init__(message)


# --- runner ---


class ScenarioError(PerpetuaError):
    code = "scenario_error"


class IncompatibleExperiment(PerpetuaError):
    code = "incompatible_experiment"
