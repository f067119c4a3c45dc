import re
from typing import Literal, Optional

from pydantic import AliasChoices, BaseModel, ConfigDict, Field, field_validator, model_validator

VERSION = "1.0.0"

SPEC_TEXT_PATTERN = re.compile(r"^(?:(?:law|b)=)?([a-z_0-9]+)(?::(.*))?$")

B_FAMILY_ALIASES = {
    "power": "power",
    "powerlog": "power_log_iter",
    "power_log_iter": "power_log_iter",
    "powerexp": "power_exp_logpow",
    "power_exp_logpow": "power_exp_logpow",
}
B_FAMILY_TEXT = {"power": "power", "power_log_iter": "powerlog", "power_exp_logpow": "powerexp"}

BASE_EXPERIMENTS = (
    "perp-moment",
    "perp-ladder",
    "perp-wald",
    "perp-growth",
    "brw-martingale",
    "brw-fixpoint",
    "spine-identity",
    "spine-sizebias",
    "ui-check",
)
INEQUALITY_NAMES = ("symm", "tailin", "tailsup", "er5001")


def sanitize_spec_text(text: str) -> str:
    text = "".join(str(text).split())
    if not SPEC_TEXT_PATTERN.match(text):
        raise ValueError(f"Malformed spec text '{text}': expected name:key=value,key=value.")
    return text


def split_spec_text(text: str) -> tuple[str, dict[str, str]]:
    """Split `law=name:k=v,k2=v2` (prefix optional) into the name and its raw parameters."""
    match = SPEC_TEXT_PATTERN.match(sanitize_spec_text(text))
    name, body = match.group(1), match.group(2)
    params: dict[str, str] = {}
    if body:
        for item in body.split(","):
            key, sep, value = item.partition("=")
            if not sep or not key or not value:
                raise ValueError(f"Malformed parameter '{item}' in '{text}'.")
            if key in params:
                raise ValueError(f"Duplicate parameter '{key}' in '{text}'.")
            params[key] = value
    return name, params


# --- b-function specs ---


class BFunctionSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Literal["power", "power_log_iter", "power_exp_logpow"] = "power"
    alpha: float = Field(gt=0)
    k: int = Field(default=1, ge=0)
    beta: float = Field(default=0.0, ge=0)
    gamma_exp: float = Field(default=0.5, gt=0, lt=1)

    @field_validator("family", mode="before")
    @classmethod
    def normalize_family(cls, v: str) -> str:
        family = B_FAMILY_ALIASES.get(str(v).strip().lower())
        if family is None:
            raise ValueError(f"Unknown b family '{v}'.")
        return family

    @classmethod
    def parse(cls, text: str) -> "BFunctionSpec":
        name, params = split_spec_text(text)
        if "gamma" in params:
            params["gamma_exp"] = params.pop("gamma")
        unknown = set(params) - {"alpha", "k", "beta", "gamma_exp"}
        if unknown:
            raise ValueError(f"Unknown b parameters {sorted(unknown)} in '{text}'.")
        return cls(family=name, **params)

    def text(self) -> str:
        name = B_FAMILY_TEXT[self.family]
        if self.family == "power":
            return f"{name}:alpha={self.alpha:g}"
        if self.family == "power_log_iter":
            return f"{name}:alpha={self.alpha:g},k={self.k}"
        return f"{name}:alpha={self.alpha:g},beta={self.beta:g},gamma={self.gamma_exp:g}"


# --- Run configuration ---


class Policy(BaseModel):
    model_config = ConfigDict(frozen=True)

    eps: float = Field(default=1e-12, gt=0)
    nmax: int = Field(default=1_000_000, ge=1)
    quiet_steps: int = Field(default=16, ge=1)
    pop_cap: int = Field(default=2**22, ge=1)
    gen_cap: int = Field(default=30, ge=1)
    confidence: float = Field(default=0.99, gt=0, lt=1)


class Scenario(BaseModel):
    seed: int = Field(default=0, ge=0, lt=2**64)
    replicates: int = Field(default=10_000, ge=2)
    law: str
    bspec: str = "power:alpha=1"
    experiment: str
    horizon: int = Field(default=6, ge=0)
    policy: Policy = Field(default_factory=Policy)
    output: Optional[str] = None
    threads: int = Field(default=1, ge=1)

    @field_validator("law", "bspec", mode="before")
    @classmethod
    def validate_spec_text(cls, v: str) -> str:
        return sanitize_spec_text(v)

    @field_validator("experiment", mode="before")
    @classmethod
    def validate_experiment(cls, v: str) -> str:
        v = str(v).strip()
        if v in BASE_EXPERIMENTS:
            return v
        prefix, _, name = v.partition(":")
        if prefix == "inequality" and name in INEQUALITY_NAMES:
            return v
        raise ValueError(
            f"Unknown experiment '{v}'. Choose one of {', '.join(BASE_EXPERIMENTS)} "
            f"or inequality:<{'|'.join(INEQUALITY_NAMES)}>."
        )

    @model_validator(mode="after")
    def check_horizon(self) -> "Scenario":
        if self.horizon > self.policy.gen_cap:
            raise ValueError(f"horizon {self.horizon} exceeds gen_cap {self.policy.gen_cap}.")
        return self


# --- Result records ---


class EstimateReport(BaseModel):
    estimate: float
    stderr: float = Field(ge=0)
    n: int = Field(ge=0)
    ci: tuple[float, float]
    seed: int = 0
    law_id: str = ""
    tag: str = ""

    @model_validator(mode="after")
    def check_interval(self) -> "EstimateReport":
        lo, hi = self.ci
        if not lo <= self.estimate <= hi:
            raise ValueError(f"Interval {self.ci} does not contain estimate {self.estimate}.")
        return self

    def contains(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]


class CurvePoint(BaseModel):
    t: float
    estimate: float
    lo: float
    hi: float


class ResultRecord(BaseModel):
    experiment: str
    law: str
    seed: int
    n: int
    tag: str = ""
    estimate: Optional[float] = None
    ci: Optional[tuple[float, float]] = None
    passed: bool = Field(
        default=True,
        serialization_alias="pass",
        validation_alias=AliasChoices("pass", "passed"),
    )
    informational: bool = False
    elapsed_ms: Optional[float] = None
    version: str = VERSION
    detail: dict = Field(default_factory=dict)
    curve: list[CurvePoint] = Field(default_factory=list)

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, exclude_none=True)
