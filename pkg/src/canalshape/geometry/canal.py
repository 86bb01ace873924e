"""Closed surfaces made of a membrane patch and a wall patch."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mesh import build_mesh
from .patches import (
    ArcSegment,
    GridPatch,
    LineSegment,
    ParamPatch,
    RadialGraphPatch,
    RevolutionPatch,
    patch_from_dict,
)

SEAM_TOL = 1e-12


class GeometryError(ValueError):
    """The membrane and wall do not form a valid closed surface."""


@dataclass(frozen=True, eq=False)
class CanalGeometry:
    """Membrane ``F`` (known) plus wall ``G`` (unknown in inversion).

    The membrane boundary row ``t = 1`` and the wall boundary row ``t = 0``
    form the shared seam. ``wall=None`` is the degenerate mode in which the
    membrane alone is a closed surface.
    """

    membrane: ParamPatch
    wall: Optional[ParamPatch] = None
    check: bool = True

    def __post_init__(self):
        if self.check:
            self.validate()

    @property
    def patches(self) -> tuple[ParamPatch, ...]:
        return (self.membrane,) if self.wall is None else (self.membrane, self.wall)

    @property
    def diameter(self) -> float:
        pts = np.concatenate([p.sample_grid(17, 17).reshape(-1, 3) for p in self.patches])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def seam_gap(self, n: int = 65) -> float:
        """Largest distance between matching seam samples of the two patches."""
        if self.wall is None:
            return 0.0
        v = np.linspace(0.0, 1.0, n)
        a = self.membrane.points(np.ones_like(v), v)
        b = self.wall.points(np.zeros_like(v), v)
        return float(np.linalg.norm(a - b, axis=-1).max())

    def signed_volume(self, res: int = 16) -> float:
        vol = 0.0
        for p in self.patches:
            m = build_mesh(p, res, 2 * res)
            vol += float(np.sum(np.einsum("ij,ij->i", m.nodes, m.normals) * m.weights)) / 3.0
        return vol

    def validate(self) -> None:
        diam = self.diameter
        gap = self.seam_gap()
        if gap > SEAM_TOL * diam:
            raise GeometryError(f"seam gap {gap:.3e} exceeds {SEAM_TOL:g} x diameter")
        if self.wall is not None:
            v = np.linspace(0.02, 0.98, 25)
            eps = 1e-6
            _, at, av = self.membrane.evaluate(np.full_like(v, 1 - eps), v)
            _, bt, bv = self.wall.evaluate(np.full_like(v, eps), v)
            na = self.membrane.orientation * np.cross(at, av)
            nb = self.wall.orientation * np.cross(bt, bv)
            if np.any(np.einsum("ij,ij->i", na, nb) <= 0):
                raise GeometryError("membrane and wall normals disagree along the seam")
        if self.signed_volume() <= 0:
            raise GeometryError("signed volume is not positive; normals point inward")

    def with_wall(self, wall: ParamPatch) -> "CanalGeometry":
        return CanalGeometry(self.membrane, wall, self.check)

    def transformed(self, rotation, translation) -> "CanalGeometry":
        wall = None if self.wall is None else self.wall.transformed(rotation, translation)
        return CanalGeometry(self.membrane.transformed(rotation, translation), wall, self.check)

    def to_dict(self) -> dict:
        return {
            "membrane": self.membrane.to_dict(),
            "wall": None if self.wall is None else self.wall.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CanalGeometry":
        wall = d.get("wall")
        return cls(patch_from_dict(d["membrane"]), None if wall is None else patch_from_dict(wall))


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------
def membrane_cap(radius: float) -> RevolutionPatch:
    """Hemispherical membrane below z = 0; t runs from the pole to the seam."""
    return RevolutionPatch((ArcSegment((0.0, 0.0), radius, -math.pi / 2, 0.0),), orientation=-1)


def tube_reference(radius: float, length: float) -> RevolutionPatch:
    """Straight tube of the given length closed by a hemispherical end cap."""
    return RevolutionPatch((
        LineSegment((radius, 0.0), (radius, length)),
        ArcSegment((0.0, length), radius, 0.0, math.pi / 2),
    ), orientation=-1)


def default_wall_knots() -> np.ndarray:
    """Control rows clustered toward the seam, where the data are sensitive."""
    return np.array([0.0, 0.03, 0.07, 0.12, 0.18, 0.26, 0.4, 0.65, 1.0])


def canal_geometry(
    radius: float = 0.3,
    length: float = 2.5,
    t_knots=None,
    n_ctrl_v: int = 6,
    offsets=None,
) -> CanalGeometry:
    """Capsule-shaped canal: membrane cap, tube wall as a radial graph."""
    knots = default_wall_knots() if t_knots is None else np.asarray(t_knots, float)
    if offsets is None:
        offsets = np.zeros((len(knots), n_ctrl_v))
    wall = RadialGraphPatch(tube_reference(radius, length), knots, offsets)
    return CanalGeometry(membrane_cap(radius), wall)


def bump_profile(z, phi, radius: float, amplitude: float, z_start: float, z_end: float,
                 angular: float = 0.5) -> np.ndarray:
    """Smooth compact radial bump: ``amplitude * radius`` at its crest.

    The axial shape is ``sin^2`` over ``[z_start, z_end]`` and the azimuthal
    modulation ``(1 + angular * cos(phi)) / (1 + angular)``.
    """
    z = np.asarray(z, float)
    s = np.clip((z - z_start) / (z_end - z_start), 0.0, 1.0)
    axial = np.sin(math.pi * s) ** 2
    return amplitude * radius * axial * (1 + angular * np.cos(phi)) / (1 + angular)


def bumped_offsets(reference: RevolutionPatch, t_knots, n_v: int, radius: float,
                   amplitude: float, z_start: float = 0.05, z_end: float = 0.85,
                   angular: float = 0.5) -> np.ndarray:
    """Sample ``bump_profile`` on a control grid of the reference wall."""
    tt, vv = np.meshgrid(np.asarray(t_knots, float), np.arange(n_v) / n_v, indexing="ij")
    z = reference.points(tt, vv)[..., 2] - reference.origin[2]
    offs = bump_profile(z, 2 * math.pi * vv, radius, amplitude, z_start, z_end, angular)
    offs[0] = 0.0
    offs[-1] = 0.0
    return offs


def bumped_canal(amplitude: float, radius: float = 0.3, length: float = 2.5,
                 n_knots_t: int = 61, n_ctrl_v: int = 24, **bump) -> CanalGeometry:
    """Canal whose wall carries ``bump_profile`` on a dense control grid."""
    ref = tube_reference(radius, length)
    knots = np.linspace(0.0, 1.0, n_knots_t)
    offs = bumped_offsets(ref, knots, n_ctrl_v, radius, amplitude, **bump)
    return CanalGeometry(membrane_cap(radius), RadialGraphPatch(ref, knots, offs))


def sphere_geometry(radius: float = 1.0, split: bool = False, center=(0.0, 0.0, 0.0)) -> CanalGeometry:
    """Sphere as one closed patch, or as lower/upper hemispheres."""
    if split:
        mem = RevolutionPatch((ArcSegment((0.0, 0.0), radius, -math.pi / 2, 0.0),), -1, center)
        wall = RevolutionPatch((ArcSegment((0.0, 0.0), radius, 0.0, math.pi / 2),), -1, center)
        return CanalGeometry(mem, wall)
    full = RevolutionPatch((ArcSegment((0.0, 0.0), radius, -math.pi / 2, math.pi / 2),), -1, center)
    return CanalGeometry(full)


def cylinder_patch(radius: float, height: float) -> RevolutionPatch:
    """Open cylinder about the z axis (not closed; for mesh tests)."""
    return RevolutionPatch((LineSegment((radius, 0.0), (radius, height)),), orientation=-1)


def box_geometry(size=(1.0, 1.0, 1.0), per_side: int = 2) -> CanalGeometry:
    """Axis-aligned box as a single bilinear grid patch (bottom, sides, top)."""
    a, b, c = (float(s) for s in size)
    m = per_side
    ring = []
    corners = [(0, 0), (a, 0), (a, b), (0, b)]
    for k in range(4):
        p0, p1 = np.array(corners[k]), np.array(corners[(k + 1) % 4])
        for j in range(m):
            ring.append(p0 + (p1 - p0) * j / m)
    ring.append(ring[0])
    ring = np.array(ring)
    n = len(ring)
    center = np.array([a / 2, b / 2])
    rows = [
        np.column_stack([np.tile(center, (n, 1)), np.zeros(n)]),
        np.column_stack([ring, np.zeros(n)]),
        np.column_stack([ring, np.full(n, c)]),
        np.column_stack([np.tile(center, (n, 1)), np.full(n, c)]),
    ]
    patch = GridPatch(np.stack(rows), interpolation="bilinear", orientation=-1, periodic_v=True)
    return CanalGeometry(patch)
