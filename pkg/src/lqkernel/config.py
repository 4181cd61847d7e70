"""Run configuration: a single JSON document, validated strictly."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import DomainError, UsageError
from .linsys import LinearSystem, MatrixFunction, as_matrix_function, check_times
from .presets import preset_document
from .socp import EQUALITY, LINEAR, LossPoint, ProblemSpec
from .tightening import DEFAULT_SAMPLES, ConstraintSpec, Covering, build_uniform_covering
from .trajectory import DEFAULT_DENSE_FACTOR


class ConfigError(UsageError):
    """Raised for unreadable or invalid run configurations."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SampledMatrix(_Strict):
    times: list[float]
    values: list[Union[list[list[float]], list[float], float]]


Matrix = Union[list[list[float]], list[float], float, SampledMatrix]


def _matrix(m) -> MatrixFunction:
    if isinstance(m, SampledMatrix):
        return as_matrix_function({"times": m.times, "values": m.values})
    return as_matrix_function(m)


class SystemConfig(_Strict):
    A: Matrix
    B: Matrix
    T: float = Field(1.0, gt=0)
    Q: Optional[Matrix] = None
    R: Optional[Matrix] = None
    n_grid: int = Field(2001, ge=3)
    state_names: Optional[list[str]] = None


class ConstraintsConfig(_Strict):
    C: Matrix
    d: Matrix
    labels: Optional[list[str]] = None


class CoveringConfig(_Strict):
    n_points: Optional[int] = Field(None, ge=1)
    centers: Optional[list[float]] = None
    radii: Optional[list[float]] = None

    @model_validator(mode="after")
    def _one_form(self):
        explicit = self.centers is not None or self.radii is not None
        if explicit == (self.n_points is not None):
            raise ValueError("give either n_points or both centers and radii")
        if explicit and (self.centers is None or self.radii is None):
            raise ValueError("centers and radii must be given together")
        return self


class LossPointConfig(_Strict):
    t: float
    c: list[float]
    kind: Literal["equality", "linear"] = "equality"
    value: float = 0.0
    weight: float = 0.0


class SolverConfig(_Strict):
    tol: float = Field(1e-8, gt=0)
    max_iter: int = Field(200, ge=1)
    lambda_cond: Optional[float] = Field(None, ge=0)


class EtaConfig(_Strict):
    n_samples: int = Field(DEFAULT_SAMPLES, ge=2)
    safety: float = Field(1.0, ge=0)
    scale: dict[str, float] = Field(default_factory=dict)
    override: dict[str, float] = Field(default_factory=dict)
    study_families: Optional[list[str]] = None


class RunConfig(_Strict):
    preset: Optional[str] = None
    preset_options: dict[str, Union[float, int]] = Field(default_factory=dict)
    system: Optional[SystemConfig] = None
    constraints: Optional[ConstraintsConfig] = None
    covering: Optional[CoveringConfig] = None
    loss_points: list[LossPointConfig] = Field(default_factory=list)
    x0: Optional[list[float]] = None
    impose_initial: bool = True
    solver: SolverConfig = Field(default_factory=SolverConfig)
    eta: EtaConfig = Field(default_factory=EtaConfig)
    dense_factor: int = Field(DEFAULT_DENSE_FACTOR, ge=1)
    kernel_times: list[float] = Field(default_factory=list)
    output_dir: str = "out"

    @model_validator(mode="before")
    @classmethod
    def _expand_preset(cls, data):
        if not isinstance(data, dict) or data.get("preset") is None:
            return data
        base = preset_document(data["preset"], **data.get("preset_options", {}))
        eta = {**base.pop("eta", {}), **data.get("eta", {})}
        merged = {**base, **data}
        if eta:
            merged["eta"] = eta
        return merged

    @model_validator(mode="after")
    def _needs_system(self):
        if self.system is None:
            raise ValueError("a system (or a preset) is required")
        if self.constraints is not None and self.covering is None:
            raise ValueError("constraints need a covering")
        return self


def load_config(path) -> RunConfig:
    """Read and validate a config file; every failure becomes :class:`ConfigError`."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data, source=str(path))


def parse_config(data, source: str = "<config>") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        lines = [f"{source}: {exc.error_count()} validation error(s)"]
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"  {loc}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None
    except UsageError as exc:
        raise ConfigError(f"{source}: {exc}") from None


@dataclass
class Problem:
    """Numerical objects built from a validated config."""

    system: LinearSystem
    constraints: ConstraintSpec
    covering: Covering | None
    loss_points: list[LossPoint]
    x0: np.ndarray | None
    state_names: list[str]

    def spec(self, lambda_cond=None, impose_initial=True, covering=None) -> ProblemSpec:
        return ProblemSpec(self.system, self.constraints, covering if covering is not None else self.covering,
                           self.loss_points, self.x0, lambda_cond, impose_initial)


def build_problem(cfg: RunConfig, n_points: int | None = None) -> Problem:
    """Turn a config into solver objects; ``n_points`` replaces the covering size."""
    try:
        s = cfg.system
        system = LinearSystem(A=_matrix(s.A), B=_matrix(s.B), T=s.T,
                              Q=None if s.Q is None else _matrix(s.Q),
                              R=None if s.R is None else _matrix(s.R), n_grid=s.n_grid)
        N = system.N
        names = s.state_names or [f"x{i + 1}" for i in range(N)]
        if len(names) != N:
            raise UsageError(f"state_names needs {N} entries")
        if cfg.constraints is None:
            cons = ConstraintSpec.empty(N)
        else:
            c = cfg.constraints
            cons = ConstraintSpec(_matrix(c.C), _matrix(c.d), c.labels)
            if cons.C.shape[1] != N:
                raise UsageError(f"constraint matrix needs {N} columns")
            if len(set(cons.labels)) != cons.P or len(cons.labels) != cons.P:
                raise UsageError("constraint labels must be unique, one per row")
        cov = None
        if cfg.covering is not None:
            if n_points is not None or cfg.covering.n_points is not None:
                cov = build_uniform_covering(s.T, n_points or cfg.covering.n_points)
            else:
                cov = Covering(cfg.covering.centers, cfg.covering.radii)
        pts = []
        for p in cfg.loss_points:
            if len(p.c) != N:
                raise UsageError(f"loss point direction needs {N} entries")
            check_times(p.t, s.T)
            pts.append(LossPoint(p.t, p.c, EQUALITY if p.kind == "equality" else LINEAR,
                                 value=p.value, weight=p.weight))
        x0 = None if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
        if cfg.impose_initial and (x0 is None or len(x0) != N):
            raise UsageError(f"x0 with {N} entries is required unless impose_initial is false")
        for table in (cfg.eta.scale, cfg.eta.override):
            unknown = set(table) - set(cons.labels)
            if unknown:
                raise UsageError(f"eta options name unknown constraints {sorted(unknown)}")
        return Problem(system, cons, cov, pts, x0, names)
    except (UsageError, DomainError) as exc:
        raise ConfigError(str(exc)) from None
