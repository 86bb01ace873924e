"""Validated run configuration for the command-line front end.

A configuration is a JSON document. Unknown keys are rejected and every
error names the offending field (or the line, for malformed JSON).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .forward import ConstantExcitation, GaussianBump, MeshSpec
from .geometry.canal import (
    CanalGeometry,
    box_geometry,
    bumped_offsets,
    canal_geometry,
    default_wall_knots,
    sphere_geometry,
)
from .geometry.io import load_geometry
from .inverse import InverseOptions


class ConfigError(ValueError):
    """The configuration file is malformed or violates the schema."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Complex = Union[float, tuple[float, float]]


def _pair(a: Complex) -> complex:
    return complex(*a) if isinstance(a, tuple) else complex(a)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------
class BumpConfig(_Strict):
    amplitude: float = Field(ge=0.0, lt=0.5)
    z_start: float = 0.0
    z_end: float = 0.4
    angular: float = Field(0.5, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _order(self):
        if not self.z_end > self.z_start:
            raise ValueError("z_end must exceed z_start")
        return self


class CanalConfig(_Strict):
    kind: Literal["canal"]
    radius: float = Field(0.3, gt=0.0)
    length: float = Field(2.5, gt=0.0)
    t_knots: Optional[list[float]] = None
    n_ctrl_v: int = Field(6, ge=3)
    bump: Optional[BumpConfig] = None

    @field_validator("t_knots")
    @classmethod
    def _knots(cls, v):
        if v is not None and (len(v) < 3 or v[0] != 0.0 or v[-1] != 1.0 or np.any(np.diff(v) <= 0)):
            raise ValueError("t_knots must increase strictly from 0 to 1 with at least 3 entries")
        return v

    def build(self, with_bump: bool = True) -> CanalGeometry:
        geo = canal_geometry(self.radius, self.length, self.t_knots, self.n_ctrl_v)
        if self.bump is None or not with_bump:
            return geo
        b = self.bump
        knots = default_wall_knots() if self.t_knots is None else self.t_knots
        offs = bumped_offsets(geo.wall.reference, knots, self.n_ctrl_v, self.radius, b.amplitude,
                              b.z_start, b.z_end, b.angular)
        return geo.with_wall(geo.wall.with_offsets(offs))


class BoxConfig(_Strict):
    kind: Literal["box"]
    size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("size")
    @classmethod
    def _positive(cls, v):
        if min(v) <= 0:
            raise ValueError("box sides must be positive")
        return v

    def build(self, with_bump: bool = True) -> CanalGeometry:
        return box_geometry(self.size)


class SphereConfig(_Strict):
    kind: Literal["sphere"]
    radius: float = Field(1.0, gt=0.0)
    split: bool = True

    def build(self, with_bump: bool = True) -> CanalGeometry:
        return sphere_geometry(self.radius, self.split)


class FileGeometryConfig(_Strict):
    kind: Literal["file"]
    path: str

    def build(self, with_bump: bool = True) -> CanalGeometry:
        return load_geometry(self.path)


GeometryConfig = Annotated[Union[CanalConfig, BoxConfig, SphereConfig, FileGeometryConfig],
                           Field(discriminator="kind")]


# ---------------------------------------------------------------------------
# Excitations, meshes, inversion
# ---------------------------------------------------------------------------
class ConstantConfig(_Strict):
    kind: Literal["constant"]
    amplitude: Complex = 1.0
    tapered: bool = True

    def build(self):
        return ConstantExcitation(_pair(self.amplitude), self.tapered)


class GaussianConfig(_Strict):
    kind: Literal["gaussian-bump"]
    center: tuple[float, float, float] = (0.0, 0.0, -0.3)
    width: float = Field(0.15, gt=0.0)
    amplitude: Complex = 1.0
    tapered: bool = True

    def build(self):
        return GaussianBump(self.center, self.width, _pair(self.amplitude), self.tapered)


ExcitationConfig = Annotated[Union[ConstantConfig, GaussianConfig], Field(discriminator="kind")]


class MeshConfig(_Strict):
    membrane: tuple[int, int] = (3, 4)
    wall: tuple[int, int] = (8, 4)
    order: int = Field(4, ge=1, le=8)
    wall_grading: float = Field(1.4, gt=0.0)
    fine_factor: int = Field(2, ge=1)

    @field_validator("membrane", "wall")
    @classmethod
    def _cells(cls, v):
        if min(v) < 1:
            raise ValueError("cell counts must be >= 1")
        return v

    def spec(self) -> MeshSpec:
        return MeshSpec(membrane=self.membrane, wall=self.wall, order=self.order,
                        wall_grading=self.wall_grading)


class InverseConfig(_Strict):
    tikhonov_lambda: float = Field(1e-2, ge=0.0)
    lambda_min: float = Field(1e-4, ge=0.0)
    smoothness_mu: float = Field(1e-3, ge=0.0)
    lm_damping: float = Field(1e-3, ge=0.0)
    fd_step: float = Field(1e-5, gt=0.0)
    tol_abs: float = Field(1e-8, ge=0.0)
    tol_rel: float = Field(1e-4, ge=0.0)
    max_iters: int = Field(50, ge=0)
    variable_projection: bool = True
    discrepancy_tau: float = Field(1.5, gt=0.0)
    use_model_error: bool = True
    active_rows: Optional[list[int]] = [1, 2, 3, 4]
    initial: Optional[GeometryConfig] = None
    truth: Optional[GeometryConfig] = None
    data: list[str] = []

    def options(self, noise_level: float, max_iters: Optional[int] = None,
                allow_inverse_crime: bool = False, check_k: bool = True) -> InverseOptions:
        d = self.model_dump(exclude={"initial", "truth", "data"})
        d["active_rows"] = None if self.active_rows is None else tuple(self.active_rows)
        if max_iters is not None:
            d["max_iters"] = max_iters
        return InverseOptions(**d, noise_level=noise_level or None,
                              allow_inverse_crime=allow_inverse_crime, check_k=check_k)


class RunConfig(_Strict):
    k: float = Field(gt=0.0)
    geometry: GeometryConfig
    mesh: MeshConfig = MeshConfig()
    excitations: list[ExcitationConfig] = Field(default_factory=lambda: [ConstantConfig(kind="constant")],
                                                min_length=1)
    noise_level: float = Field(0.0, ge=0.0)
    seed: int = 0
    inverse: InverseConfig = InverseConfig()
    out: str = "out"

    def initial_geometry(self) -> CanalGeometry:
        if self.inverse.initial is not None:
            return self.inverse.initial.build()
        return self.geometry.build(with_bump=False)

    def truth_geometry(self) -> Optional[CanalGeometry]:
        return None if self.inverse.truth is None else self.inverse.truth.build()

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json", exclude={"out"}), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_config(doc: dict, seed: Optional[int] = None, out: Optional[str] = None,
                 max_iters: Optional[int] = None) -> RunConfig:
    """Validate a configuration mapping after applying command-line overrides."""
    doc = dict(doc)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = out
    if max_iters is not None:
        inv = doc.get("inverse", {})
        doc["inverse"] = {**inv, "max_iters": max_iters} if isinstance(inv, dict) else inv
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigError(_format(err)) from None


def load_config(path, **overrides) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: line {err.lineno} column {err.colno}: {err.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        return parse_config(doc, **overrides)
    except ConfigError as err:
        raise ConfigError(f"{path}: {err}") from None
