"""Strict run configurations for the command-line front end.

A configuration file is a JSON object::

    {"command": "simulate-cdma", "seed": 7, "trials": 50,
     "output_path": "fig10.csv", "parameters": {...}}

``parameters`` is validated against the model registered for the command.
Unknown keys are rejected everywhere. Validation failures are reported with
the line of the offending key in the source text.
"""

from __future__ import annotations

import hashlib
import json
import re
from json.decoder import scanstring
from typing import Literal, Optional, Union

import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, ValidationError, field_validator,
                      model_validator)

from .cdma import DenoiserKind
from .core import ActivityModel, SystemConfig
from .coupling import CouplingSpec, make_base_matrix

__all__ = ["ConfigError", "RunConfig", "PARAMETER_MODELS", "load_config", "config_hash",
           "json_schema"]

U64_MAX = 2 ** 64 - 1


class ConfigError(ValueError):
    """Invalid configuration; ``str`` carries one line per problem."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# ---------------------------------------------------------------- shared blocks


class CouplingConfig(_Strict):
    """Either the banded family ``(omega, lambda)`` or an explicit ``R x C`` matrix."""

    omega: Optional[int] = Field(None, ge=1)
    lambda_: Optional[int] = Field(None, alias="lambda", ge=1)
    entries: Optional[list[float]] = None
    R: Optional[int] = Field(None, ge=1)
    C: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _one_form(self):
        banded = self.omega is not None or self.lambda_ is not None
        explicit = self.entries is not None or self.R is not None or self.C is not None
        if banded and explicit:
            raise ValueError("give either omega/lambda or entries/R/C, not both")
        if explicit and None in (self.entries, self.R, self.C):
            raise ValueError("an explicit base matrix needs entries, R and C")
        if banded and None in (self.omega, self.lambda_):
            raise ValueError("the banded base matrix needs both omega and lambda")
        if explicit:
            CouplingSpec.from_json({"entries": self.entries, "R": self.R, "C": self.C})
        elif not banded:
            self.omega, self.lambda_ = 1, 1
        return self

    def spec(self) -> CouplingSpec:
        if self.entries is not None:
            return CouplingSpec.from_json({"entries": self.entries, "R": self.R, "C": self.C})
        return make_base_matrix(self.omega or 1, self.lambda_ or 1)


def _grid(v):
    if isinstance(v, (int, float)):
        return [float(v)]
    return v


class _System(_Strict):
    k: int = Field(ge=1)
    alpha: float = Field(ge=0.0, le=1.0)
    ebn0_db: list[float] = Field(min_length=1, description="Eb/N0 grid in dB")
    sigma2: float = Field(1.0, gt=0.0)

    grid_from_scalar = field_validator("ebn0_db", mode="before")(_grid)

    @field_validator("ebn0_db")
    @classmethod
    def _finite(cls, v):
        if not all(np.isfinite(v)):
            raise ValueError("Eb/N0 values must be finite")
        return v


class _Density(_System):
    """User density as ``mu`` or as the pair ``(n, L)``."""

    mu: Optional[float] = Field(None, gt=0.0)
    n: Optional[int] = Field(None, ge=1)
    L: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _density(self):
        if self.mu is None and (self.n is None or self.L is None):
            raise ValueError("set mu or both n and L")
        if (self.n is None) != (self.L is None):
            raise ValueError("n and L must be given together")
        if self.mu is not None and self.n is not None:
            if not np.isclose(self.mu, self.L / self.n, rtol=1e-12, atol=0):
                raise ValueError("mu disagrees with L/n")
        return self

    def system(self, ebn0_db: float) -> SystemConfig:
        return SystemConfig(k=self.k, alpha=self.alpha, ebn0_db=float(ebn0_db), mu=self.mu,
                            n=self.n, L=self.L, sigma2=self.sigma2)


def _check_denoiser(v: str, allowed) -> str:
    name = v.partition(":")[0]
    if name not in allowed:
        raise ValueError(f"denoiser must be one of {sorted(allowed)}")
    DenoiserKind.parse(v)
    return v


# ---------------------------------------------------------------- per-command models


class SimulateCdmaParams(_Density):
    n: int = Field(ge=1)
    L: int = Field(ge=1)
    coupling: CouplingConfig = Field(default_factory=CouplingConfig)
    denoiser: str = "threshold"
    se_mc_samples: int = Field(200_000, ge=1000)
    se_seed: int = Field(0, ge=0, le=U64_MAX)
    se_tol: float = Field(1e-8, gt=0.0)
    t_max: int = Field(200, ge=1)
    dtype: Literal["float32", "float64"] = "float64"

    check_denoiser = field_validator("denoiser")(
        lambda v: _check_denoiser(v, {"bayes", "marginal", "threshold"}))

    @model_validator(mode="after")
    def _shape(self):
        if self.n % self.k:
            raise ValueError("k must divide n")
        spec = self.coupling.spec()
        if (self.n // self.k) % spec.R or self.L % spec.C:
            raise ValueError("n/k and L must be divisible by the base-matrix dimensions")
        return self


class SimulateSparcParams(_Density):
    n: int = Field(ge=1)
    L: int = Field(ge=1)
    coupling: CouplingConfig = Field(default_factory=CouplingConfig)
    denoiser: Literal["bayes", "marginal"] = "bayes"
    se_mc_samples: int = Field(20_000, ge=1000)
    se_seed: int = Field(0, ge=0, le=U64_MAX)
    se_tol: float = Field(1e-8, gt=0.0)
    t_max: int = Field(200, ge=1)
    dtype: Literal["float32", "float64"] = "float64"

    @model_validator(mode="after")
    def _shape(self):
        spec = self.coupling.spec()
        if self.n % spec.R or self.L % spec.C:
            raise ValueError("n and L must be divisible by the base-matrix dimensions")
        return self


class SeCdmaParams(_Density):
    coupling: CouplingConfig = Field(default_factory=CouplingConfig)
    denoiser: str = "threshold"
    mc_samples: int = Field(200_000, ge=1000)
    tol: float = Field(1e-8, gt=0.0)
    t_max: int = Field(200, ge=1)
    predict_samples: int = Field(200_000, ge=1000)
    rel_se: float = Field(0.02, gt=0.0)
    trajectory: bool = False

    check_denoiser = field_validator("denoiser")(
        lambda v: _check_denoiser(v, {"bayes", "marginal", "threshold"}))


class SeSparcParams(_Density):
    coupling: CouplingConfig = Field(default_factory=CouplingConfig)
    denoiser: Literal["bayes", "marginal"] = "bayes"
    mc_samples: int = Field(20_000, ge=1000)
    tol: float = Field(1e-8, gt=0.0)
    t_max: int = Field(200, ge=1)


class _PotentialKnobs(_Density):
    kind: Literal["bayes", "marginal"] = "marginal"
    grid: int = Field(200, ge=200)
    mi_method: Literal["laplace", "mc"] = "laplace"
    mi_samples: int = Field(200_000, ge=1000)

    def mi_kwargs(self) -> dict:
        if self.kind == "marginal":
            return {}
        return {"method": self.mi_method, "mc_samples": self.mi_samples}


class PotentialParams(_PotentialKnobs):
    pass


class AsymptoticBoundsParams(_PotentialKnobs):
    theta: float = Field(1.0, gt=0.0)
    eps: float = Field(0.0, ge=0.0)
    delta: float = Field(0.0, ge=0.0)


class LogGrid(_Strict):
    start: float = Field(gt=0.0)
    stop: float = Field(gt=0.0)
    num: int = Field(ge=2)

    def values(self) -> list[float]:
        return np.geomspace(self.start, self.stop, self.num).tolist()


class SweepRegionParams(_System):
    kind: Literal["bayes", "marginal"] = "marginal"
    target: float = Field(gt=0.0, lt=1.0)
    mu_grid: Union[list[float], LogGrid]
    rel_tol: float = Field(1e-4, gt=0.0)
    grid: int = Field(200, ge=200)
    mi_method: Literal["laplace", "mc"] = "laplace"
    mi_samples: int = Field(200_000, ge=1000)

    @field_validator("mu_grid")
    @classmethod
    def _positive(cls, v):
        vals = v.values() if isinstance(v, LogGrid) else v
        if not vals or min(vals) <= 0:
            raise ValueError("mu grid must be nonempty and positive")
        return v

    def mu_values(self) -> list[float]:
        return self.mu_grid.values() if isinstance(self.mu_grid, LogGrid) else list(self.mu_grid)

    def mi_kwargs(self) -> dict:
        kw = {"grid": self.grid}
        if self.kind == "bayes":
            kw.update(method=self.mi_method, mc_samples=self.mi_samples)
        return kw


class ActivityConfig(_Strict):
    """Binomial activity with probability ``alpha`` or an explicit pmf over 0..L."""

    alpha: Optional[float] = Field(None, ge=0.0, le=1.0)
    pmf: Optional[list[float]] = None

    @model_validator(mode="after")
    def _one(self):
        if (self.alpha is None) == (self.pmf is None):
            raise ValueError("give exactly one of alpha or pmf")
        return self

    def model(self, L: int) -> ActivityModel:
        if self.pmf is not None:
            if len(self.pmf) != L + 1:
                raise ValueError(f"pmf must have L+1 = {L + 1} entries")
            return ActivityModel.explicit(self.pmf)
        return ActivityModel.binomial(L, self.alpha)


class FiniteBoundsParams(_Strict):
    n: int = Field(ge=1)
    L: int = Field(ge=1, le=200)
    k: int = Field(ge=1)
    ebn0_db: list[float] = Field(min_length=1)
    activity: ActivityConfig
    pbar: Optional[float] = Field(None, gt=0.0, lt=1.0)
    kl: Optional[int] = Field(None, ge=0)
    ku: Optional[int] = Field(None, ge=0)
    rl: int = Field(0, ge=0)
    ru: int = Field(0, ge=0)
    pprime_policy: Literal["fixed", "optimize"] = "optimize"
    pprime_frac: float = Field(0.8, gt=0.0, lt=1.0)

    grid_from_scalar = field_validator("ebn0_db", mode="before")(_grid)

    @model_validator(mode="after")
    def _tails(self):
        explicit = self.kl is not None or self.ku is not None
        if explicit == (self.pbar is not None):
            raise ValueError("give either pbar or both kl and ku")
        if explicit:
            if self.kl is None or self.ku is None:
                raise ValueError("kl and ku must be given together")
            if not self.kl <= self.ku <= self.L:
                raise ValueError("need kl <= ku <= L")
        self.activity.model(self.L)
        return self


PARAMETER_MODELS: dict[str, type[_Strict]] = {
    "simulate-cdma": SimulateCdmaParams,
    "simulate-sparc": SimulateSparcParams,
    "se-cdma": SeCdmaParams,
    "se-sparc": SeSparcParams,
    "potential": PotentialParams,
    "asymptotic-bounds": AsymptoticBoundsParams,
    "finite-bounds": FiniteBoundsParams,
    "sweep-region": SweepRegionParams,
}

Command = Literal["simulate-cdma", "simulate-sparc", "se-cdma", "se-sparc", "potential",
                  "asymptotic-bounds", "finite-bounds", "sweep-region"]


class RunConfig(_Strict):
    command: Command
    parameters: dict
    seed: int = Field(0, ge=0, le=U64_MAX)
    trials: int = Field(1, ge=0)
    output_path: Optional[str] = None

    # validated copy of ``parameters``; set by :func:`load_config`
    _params: BaseModel | None = None

    @property
    def params(self):
        return self._params

    def resolved(self) -> dict:
        """Fully resolved configuration with defaults filled in."""
        return {"command": self.command, "seed": self.seed, "trials": self.trials,
                "output_path": self.output_path,
                "parameters": self._params.model_dump(mode="json", by_alias=True)}


def config_hash(resolved: dict) -> str:
    """SHA-256 of the resolved configuration without seed and output location.

    Runs that differ only in seed share a hash, which is what aggregation
    groups on.
    """
    d = {k: v for k, v in resolved.items() if k not in ("seed", "output_path")}
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def json_schema(command: str | None = None) -> dict:
    if command is None:
        return RunConfig.model_json_schema()
    return PARAMETER_MODELS[command].model_json_schema(by_alias=True)


# ---------------------------------------------------------------- line lookup

_WS = re.compile(r"[ \t\n\r]*")
_SCALAR = re.compile(r"-?(?:0|[1-9]\d*)(?:\.\d+)?(?:[eE][-+]?\d+)?|true|false|null|NaN|-?Infinity")


def _key_lines(text: str) -> dict[tuple, int]:
    """Map each key path (and list index) of a valid JSON document to its line."""
    out: dict[tuple, int] = {}
    line_of = lambda i: text.count("\n", 0, i) + 1  # noqa: E731

    def ws(i):
        return _WS.match(text, i).end()

    def value(i, path):
        i = ws(i)
        out.setdefault(path, line_of(i))
        ch = text[i]
        if ch == "{":
            i = ws(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                i = ws(i)
                key, j = scanstring(text, i + 1)
                out[path + (key,)] = line_of(i)
                j = ws(j) + 1  # ':'
                j = value(j, path + (key,))
                j = ws(j)
                if text[j] == "}":
                    return j + 1
                i = j + 1
        if ch == "[":
            i = ws(i + 1)
            if text[i] == "]":
                return i + 1
            idx = 0
            while True:
                i = value(i, path + (idx,))
                i = ws(i)
                if text[i] == "]":
                    return i + 1
                i += 1
                idx += 1
        if ch == '"':
            return scanstring(text, i + 1)[1]
        return _SCALAR.match(text, i).end()

    value(0, ())
    return out


def _locate(lines: dict[tuple, int], loc: tuple) -> int:
    loc = tuple(loc)
    while loc and loc not in lines:
        loc = loc[:-1]
    return lines.get(loc, 1)


def _format_errors(path: str, text: str, err: ValidationError, prefix: tuple = ()) -> str:
    lines = _key_lines(text)
    msgs = []
    for e in err.errors():
        loc = prefix + tuple(x for x in e["loc"] if not (isinstance(x, str) and "[" in x))
        where = ".".join(str(x) for x in loc) or "<root>"
        msgs.append(f"{path}:{_locate(lines, loc)}: {where}: {e['msg']}")
    return "\n".join(msgs)


def load_config(path: str, command: str | None = None, seed: int | None = None) -> RunConfig:
    """Read, validate and resolve a run configuration.

    ``command`` (from the command line) must match the file's ``command``
    when both are present; ``seed`` overrides the file's seed.
    """
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: configuration must be a JSON object")
    if command is not None:
        if "command" in raw and raw["command"] != command:
            line = _locate(_key_lines(text), ("command",))
            raise ConfigError(f"{path}:{line}: command: file says {raw['command']!r} "
                              f"but {command!r} was requested")
        raw = {**raw, "command": command}
    if seed is not None:
        raw["seed"] = seed
    try:
        rc = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(path, text, exc)) from None
    try:
        params = PARAMETER_MODELS[rc.command].model_validate(rc.parameters)
    except ValidationError as exc:
        raise ConfigError(_format_errors(path, text, exc, ("parameters",))) from None
    except ValueError as exc:
        line = _locate(_key_lines(text), ("parameters",))
        raise ConfigError(f"{path}:{line}: parameters: {exc}") from None
    rc._params = params
    return rc
