"""Run configuration: pydantic models shared by the CLI and the HTTP service."""
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .fields import FIELD_TYPES


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 2)."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FieldSpec(BaseModel):
    """A named built-in field with its parameters."""
    model_config = ConfigDict(extra="allow")
    type: str

    @field_validator("type")
    @classmethod
    def _known(cls, v):
        if v not in FIELD_TYPES:
            raise ValueError(f"unknown field type {v!r}; expected one of {sorted(FIELD_TYPES)}")
        return v


class ProblemSpec(_Model):
    analytic: Optional[str] = None
    resolution: int = Field(256, ge=8)
    kind: Literal["poisson", "screened"] = "poisson"
    sigma: float = Field(0.0, ge=0.0)
    f: Optional[FieldSpec] = None
    g: Optional[FieldSpec] = None
    h: Optional[FieldSpec] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.kind == "poisson" and self.sigma != 0.0:
            raise ValueError("sigma must be 0 for kind 'poisson'")
        if self.kind == "screened" and self.sigma <= 0.0:
            raise ValueError("kind 'screened' needs sigma > 0")
        if self.analytic is not None and any(v is not None for v in (self.f, self.g, self.h)):
            raise ValueError("analytic problems define their own f, g and h")
        return self


class WalkSpec(_Model):
    n_walks: int = Field(64, ge=1)
    epsilon: Optional[float] = Field(None, gt=0.0)
    r_min: Optional[float] = Field(None, gt=0.0)
    max_steps: int = Field(10_000, ge=1)
    control_variate: bool = True


class CacheSpec(_Model):
    n_boundary: int = Field(1024, ge=1)
    n_source: int = Field(1024, ge=1)
    n_walks_neumann: int = Field(64, ge=1)
    n_walks_dirichlet: Optional[int] = Field(None, ge=1)
    offset: Optional[float] = Field(None, gt=0.0)
    clamp: Optional[float] = Field(None, gt=0.0)
    correction: Literal["off", "clamp-only", "clamp+correct"] = "off"
    correction_walks: int = Field(16, ge=1)
    correction_rays: int = Field(8, ge=1)
    stratified: bool = True
    voronoi: bool = False
    neumann_start: Literal["nudge", "boundary"] = "nudge"
    exact_data: bool = False


class GridSpec(_Model):
    origin: Tuple[float, float]
    spacing: Union[float, Tuple[float, float]]
    nx: int = Field(ge=1)
    ny: int = Field(ge=1)

    @field_validator("spacing")
    @classmethod
    def _positive(cls, v):
        vals = v if isinstance(v, tuple) else (v,)
        if any(s <= 0 for s in vals):
            raise ValueError("spacing must be positive")
        return v


class RegionSpec(_Model):
    kind: Literal["whole", "subdomain"] = "whole"
    path: Optional[str] = None

    @model_validator(mode="after")
    def _needs_path(self):
        if self.kind == "subdomain" and not self.path:
            raise ValueError("subdomain regions need a loop file path")
        return self


class OutputSpec(_Model):
    grid_csv: Optional[str] = None
    image: Optional[str] = None
    image_range: Optional[Tuple[float, float]] = None
    report_csv: Optional[str] = None
    polylines: Optional[str] = None
    table_csv: Optional[str] = None


class ConvergeSpec(_Model):
    parameter: Literal["n_boundary", "n_walks", "rounds"] = "n_boundary"
    values: List[int] = Field(default_factory=lambda: [64, 128, 256, 512, 1024, 2048, 4096])
    seeds: int = Field(10, ge=1)


class StreamlineSpec(_Model):
    seeds: List[Tuple[float, float]] = Field(default_factory=list)
    step: float = Field(0.01, gt=0.0)
    n_steps: int = Field(100, ge=1)


class AblateSpec(_Model):
    parameter: Literal["l", "c", "mode"] = "l"
    values: List[Union[float, str]] = Field(default_factory=list)


class OracleSpec(_Model):
    method: Literal["exact", "bie", "fd"] = "exact"
    fd_spacing: Optional[float] = Field(None, gt=0.0)
    quadrature_nodes: int = Field(1 << 16, ge=1 << 16)


class RunConfig(_Model):
    scene: Optional[str] = None
    problem: ProblemSpec = Field(default_factory=ProblemSpec)
    mode: Literal["bvc", "wos", "wost"] = "bvc"
    walk: WalkSpec = Field(default_factory=WalkSpec)
    cache: CacheSpec = Field(default_factory=CacheSpec)
    rounds: int = Field(1, ge=1)
    gradient: bool = False
    grid: Optional[GridSpec] = None
    points: Optional[List[Tuple[float, float]]] = None
    region: RegionSpec = Field(default_factory=RegionSpec)
    outputs: OutputSpec = Field(default_factory=OutputSpec)
    seed: int = Field(0, ge=0)
    threads: Optional[int] = Field(None, ge=1)
    converge: ConvergeSpec = Field(default_factory=ConvergeSpec)
    streamlines: StreamlineSpec = Field(default_factory=StreamlineSpec)
    ablate: AblateSpec = Field(default_factory=AblateSpec)
    oracle: OracleSpec = Field(default_factory=OracleSpec)

    @model_validator(mode="after")
    def _check(self, info):
        if self.scene is None and self.problem.analytic is None:
            raise ValueError("either 'scene' or 'problem.analytic' is required")
        if self.scene is not None and self.problem.analytic is not None:
            raise ValueError("'scene' and 'problem.analytic' are mutually exclusive")
        if self.grid is not None and self.points is not None:
            raise ValueError("give either 'grid' or 'points', not both")
        if self.cache.exact_data and self.problem.analytic is None:
            raise ValueError("cache.exact_data needs an analytic problem")
        base = (info.context or {}).get("base_dir") if info is not None else None
        if base is not None:
            for label, p in (("scene", self.scene), ("region.path", self.region.path)):
                if p is not None and not (Path(base) / p).exists():
                    raise ValueError(f"{label}: file not found: {p}")
        return self

    def resolve_paths(self, base_dir):
        """Copy with input and output paths made absolute against ``base_dir``."""
        base = Path(base_dir)

        def absolute(p):
            return None if p is None else str((base / p).resolve())

        data = self.model_dump()
        data["scene"] = absolute(data["scene"])
        data["region"]["path"] = absolute(data["region"]["path"])
        for key, val in data["outputs"].items():
            if isinstance(val, str):
                data["outputs"][key] = absolute(val)
        return RunConfig.model_validate(data)


def format_validation_error(exc):
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data, base_dir=None):
    try:
        return RunConfig.model_validate(data, context={"base_dir": base_dir})
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from None


def load_config(path):
    """Read and validate a JSON config; relative paths resolve against its folder."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    cfg = parse_config(data, base_dir=str(path.parent))
    return cfg.resolve_paths(path.parent)


def dump_config(cfg):
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)
