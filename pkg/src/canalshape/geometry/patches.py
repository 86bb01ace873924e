"""Parametric surface patches over the unit parameter square.

Every patch maps ``(t, v) in (0, 1)^2`` to 3-space by three scalar
coordinate functions and exposes the first derivatives needed for normals
and area elements. Three kinds are provided:

``GridPatch``
    tensor-product bilinear or bicubic (C1 cubic Hermite, Catmull-Rom
    slopes) interpolation of a control grid of 3D points.
``RevolutionPatch``
    a surface of revolution built from an arclength-parameterized profile
    of line and circular-arc segments; ``v`` is the azimuth fraction.
``RadialGraphPatch``
    a scalar offset field along the outward normal of a reference
    ``RevolutionPatch``; the offsets live on a control grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class DegenerateParameterizationError(ValueError):
    """Raised when a patch Jacobian collapses at a requested point."""


# ---------------------------------------------------------------------------
# 1D interpolation bases
# ---------------------------------------------------------------------------
def _slope_matrix(knots: np.ndarray, periodic: bool) -> np.ndarray:
    """Rows give the nodal slope at each knot as a combination of values."""
    n_knots = len(knots)
    n_val = n_knots - 1 if periodic else n_knots
    D = np.zeros((n_knots, n_val))
    if n_knots == 2 and not periodic:
        h = knots[1] - knots[0]
        D[:, 0], D[:, 1] = -1.0 / h, 1.0 / h
        return D
    for i in range(n_knots):
        if periodic:
            im, ii, ip = (i - 1) % n_val, i % n_val, (i + 1) % n_val
            hl = knots[i] - knots[i - 1] if i > 0 else knots[-1] - knots[-2]
            hr = knots[i + 1] - knots[i] if i < n_knots - 1 else knots[1] - knots[0]
        elif 0 < i < n_knots - 1:
            im, ii, ip = i - 1, i, i + 1
            hl = knots[i] - knots[i - 1]
            hr = knots[i + 1] - knots[i]
        else:
            # one-sided quadratic through the three end values
            if i == 0:
                h1, h2 = knots[1] - knots[0], knots[2] - knots[1]
                D[i, 0] = -(2 * h1 + h2) / (h1 * (h1 + h2))
                D[i, 1] = (h1 + h2) / (h1 * h2)
                D[i, 2] = -h1 / (h2 * (h1 + h2))
            else:
                h1, h2 = knots[-1] - knots[-2], knots[-2] - knots[-3]
                D[i, -1] = (2 * h1 + h2) / (h1 * (h1 + h2))
                D[i, -2] = -(h1 + h2) / (h1 * h2)
                D[i, -3] = h1 / (h2 * (h1 + h2))
            continue
        D[i, ip] += hl / (hr * (hl + hr))
        D[i, im] += -hr / (hl * (hl + hr))
        D[i, ii] += (hr - hl) / (hl * hr)
    return D


def interpolation_stencil(
    knots: Sequence[float],
    x: np.ndarray,
    kind: str = "cubic",
    periodic: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Compact form of ``interpolation_basis``.

    Every point touches at most the four nodal values ``idx-1 .. idx+2``
    around its interval. Returns ``(cols, B, dB)`` each of shape
    ``x.shape + (4,)``; repeated or out-of-range columns carry zero weight.
    """
    knots = np.asarray(knots, dtype=float)
    x = np.asarray(x, dtype=float)
    n_knots = len(knots)
    n_val = n_knots - 1 if periodic else n_knots
    flat = x.reshape(-1)
    idx = np.clip(np.searchsorted(knots, flat, side="right") - 1, 0, n_knots - 2)
    h = knots[idx + 1] - knots[idx]
    s = (flat - knots[idx]) / h
    raw = idx[:, None] + np.arange(-1, 3)[None, :]
    if periodic:
        cols = raw % n_val
        valid = np.ones_like(cols, dtype=bool)
    else:
        valid = (raw >= 0) & (raw < n_val)
        cols = np.clip(raw, 0, n_val - 1)
    for a in range(1, 4):
        for b in range(a):
            valid[:, a] &= ~(valid[:, b] & (cols[:, a] == cols[:, b]))
    i0 = (idx % n_val)[:, None]
    i1 = ((idx + 1) % n_val)[:, None]
    E0 = (cols == i0).astype(float)
    E1 = (cols == i1).astype(float)
    if kind == "linear":
        B = (1 - s)[:, None] * E0 + s[:, None] * E1
        dB = (E1 - E0) / h[:, None]
    elif kind == "cubic":
        D = _slope_matrix(knots, periodic)
        D0, D1 = D[idx[:, None], cols], D[idx[:, None] + 1, cols]
        s2, s3 = s * s, s * s * s
        h00, h10 = 2 * s3 - 3 * s2 + 1, s3 - 2 * s2 + s
        h01, h11 = -2 * s3 + 3 * s2, s3 - s2
        d00, d10 = 6 * s2 - 6 * s, 3 * s2 - 4 * s + 1
        d01, d11 = -6 * s2 + 6 * s, 3 * s2 - 2 * s
        hh = h[:, None]
        B = (h00[:, None] * E0 + h01[:, None] * E1
             + hh * (h10[:, None] * D0 + h11[:, None] * D1))
        dB = ((d00[:, None] * E0 + d01[:, None] * E1) / hh
              + d10[:, None] * D0 + d11[:, None] * D1)
    else:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    B = np.where(valid, B, 0.0)
    dB = np.where(valid, dB, 0.0)
    shape = x.shape + (4,)
    return cols.reshape(shape), B.reshape(shape), dB.reshape(shape)


def interpolation_basis(
    knots: Sequence[float],
    x: np.ndarray,
    kind: str = "cubic",
    periodic: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Basis values and derivatives of a 1D nodal interpolant.

    Returns ``(B, dB)`` of shape ``x.shape + (n_values,)`` such that the
    interpolant of nodal values ``y`` is ``B @ y`` and its derivative
    ``dB @ y``. For periodic interpolation the last knot closes the period
    and carries no independent value.
    """
    x = np.asarray(x, dtype=float)
    n_val = len(knots) - 1 if periodic else len(knots)
    cols, b, db = interpolation_stencil(knots, x, kind, periodic)
    cols, b, db = cols.reshape(-1, 4), b.reshape(-1, 4), db.reshape(-1, 4)
    B = np.zeros((len(cols), n_val))
    dB = np.zeros((len(cols), n_val))
    rows = np.arange(len(cols))
    for a in range(4):
        B[rows, cols[:, a]] += b[:, a]
        dB[rows, cols[:, a]] += db[:, a]
    shape = x.shape + (n_val,)
    return B.reshape(shape), dB.reshape(shape)


def _frame_apply(axes: np.ndarray, origin: np.ndarray, local: np.ndarray) -> np.ndarray:
    return local @ axes.T + origin


# ---------------------------------------------------------------------------
# Patch base
# ---------------------------------------------------------------------------
class ParamPatch:
    """Common interface; subclasses implement ``_eval``."""

    orientation: int

    def evaluate(self, t, v) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Point and the two tangent vectors at parameters ``(t, v)``."""
        t, v = np.broadcast_arrays(np.asarray(t, float), np.asarray(v, float))
        return self._eval(t, v)

    def points(self, t, v) -> np.ndarray:
        return self.evaluate(t, v)[0]

    def _eval(self, t, v):  # pragma: no cover - abstract
        raise NotImplementedError

    @cached_property
    def diameter(self) -> float:
        g = np.linspace(0.0, 1.0, 17)
        tt, vv = np.meshgrid(g, g, indexing="ij")
        p = self.points(tt, vv).reshape(-1, 3)
        return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))

    def sample_grid(self, n_t: int, n_v: int) -> np.ndarray:
        """Points on a closed ``n_t x n_v`` parameter grid, edges included."""
        tt, vv = np.meshgrid(np.linspace(0, 1, n_t), np.linspace(0, 1, n_v), indexing="ij")
        return self.points(tt, vv)

    def control_points(self) -> np.ndarray:
        """A quad grid of surface points, used for export."""
        return self.sample_grid(9, 17)

    def transformed(self, rotation, translation) -> "ParamPatch":  # pragma: no cover
        raise NotImplementedError

    def to_dict(self) -> dict:  # pragma: no cover
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Control-grid patch
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class GridPatch(ParamPatch):
    """Tensor-product interpolation of an ``(M+1) x (P+1)`` grid of points."""

    control_grid: np.ndarray
    interpolation: str = "bicubic"
    orientation: int = 1
    periodic_v: bool = False

    def __post_init__(self):
        grid = np.array(self.control_grid, dtype=float)
        if grid.ndim != 3 or grid.shape[2] != 3 or min(grid.shape[:2]) < 2:
            raise ValueError(f"control grid must be (M+1, P+1, 3), got {grid.shape}")
        if self.interpolation not in ("bilinear", "bicubic"):
            raise ValueError(f"interpolation must be bilinear or bicubic, got {self.interpolation!r}")
        if self.interpolation == "bicubic" and not self.periodic_v and min(grid.shape[:2]) < 3:
            raise ValueError("bicubic interpolation needs at least 3 control rows and columns")
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 or -1")
        grid.setflags(write=False)
        object.__setattr__(self, "control_grid", grid)

    def _eval(self, t, v):
        kind = "linear" if self.interpolation == "bilinear" else "cubic"
        M, P = self.control_grid.shape[0] - 1, self.control_grid.shape[1] - 1
        Bt, dBt = interpolation_basis(np.linspace(0, 1, M + 1), t, kind)
        Bv, dBv = interpolation_basis(np.linspace(0, 1, P + 1), v, kind, periodic=self.periodic_v)
        grid = self.control_grid[:, :P] if self.periodic_v else self.control_grid
        pt = np.einsum("...i,ijc,...j->...c", Bt, grid, Bv)
        xt = np.einsum("...i,ijc,...j->...c", dBt, grid, Bv)
        xv = np.einsum("...i,ijc,...j->...c", Bt, grid, dBv)
        return pt, xt, xv

    def control_points(self) -> np.ndarray:
        return self.control_grid

    def transformed(self, rotation, translation) -> "GridPatch":
        Q = np.asarray(rotation, float)
        return GridPatch(self.control_grid @ Q.T + np.asarray(translation, float),
                         self.interpolation, self.orientation, self.periodic_v)

    def to_dict(self) -> dict:
        return {
            "kind": "grid",
            "control_grid": self.control_grid.tolist(),
            "interpolation": self.interpolation,
            "orientation": self.orientation,
            "periodic_v": self.periodic_v,
        }


# ---------------------------------------------------------------------------
# Surfaces of revolution
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class LineSegment:
    start: tuple[float, float]
    end: tuple[float, float]

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)

    def eval(self, s):
        (r0, z0), (r1, z1) = self.start, self.end
        a, b = (r1 - r0) / self.length, (z1 - z0) / self.length
        zero = np.zeros_like(s)
        return r0 + a * s, z0 + b * s, a + zero, b + zero, zero, zero

    def to_dict(self):
        return {"type": "line", "start": list(self.start), "end": list(self.end)}


@dataclass(frozen=True)
class ArcSegment:
    """Circular arc in the (rho, z) half plane, angle measured from +rho."""

    center: tuple[float, float]
    radius: float
    angle_start: float
    angle_end: float

    @property
    def length(self) -> float:
        return abs(self.angle_end - self.angle_start) * self.radius

    def eval(self, s):
        sgn = 1.0 if self.angle_end >= self.angle_start else -1.0
        a = self.angle_start + sgn * s / self.radius
        c, sn = np.cos(a), np.sin(a)
        rc, zc = self.center
        return (rc + self.radius * c, zc + self.radius * sn, -sgn * sn, sgn * c,
                -c / self.radius, -sn / self.radius)

    def to_dict(self):
        return {"type": "arc", "center": list(self.center), "radius": self.radius,
                "angle_start": self.angle_start, "angle_end": self.angle_end}


def segment_from_dict(d: dict):
    if d["type"] == "line":
        return LineSegment(tuple(d["start"]), tuple(d["end"]))
    if d["type"] == "arc":
        return ArcSegment(tuple(d["center"]), float(d["radius"]),
                          float(d["angle_start"]), float(d["angle_end"]))
    raise ValueError(f"unknown profile segment type {d['type']!r}")


@dataclass(frozen=True, eq=False)
class RevolutionPatch(ParamPatch):
    """Surface of revolution of a (rho, z) profile about the local z axis.

    ``t`` is the arclength fraction along the profile and ``v`` the
    azimuth fraction. The local frame is placed by ``origin`` and the
    orthogonal matrix ``axes`` (columns are the local x, y, z axes).
    """

    segments: tuple
    orientation: int = -1
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "origin", np.asarray(self.origin, float).reshape(3))
        object.__setattr__(self, "axes", np.asarray(self.axes, float).reshape(3, 3))
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 or -1")
        for a, b in zip(self.segments[:-1], self.segments[1:]):
            ea = a.eval(np.array(a.length))[:2]
            sb = b.eval(np.array(0.0))[:2]
            if math.dist((float(ea[0]), float(ea[1])), (float(sb[0]), float(sb[1]))) > 1e-12:
                raise ValueError("profile segments are not contiguous")

    @cached_property
    def profile_length(self) -> float:
        return float(sum(s.length for s in self.segments))

    def _profile(self, t):
        s = np.asarray(t, float) * self.profile_length
        out = [np.zeros_like(s) for _ in range(6)]
        start = 0.0
        for k, seg in enumerate(self.segments):
            last = k == len(self.segments) - 1
            mask = (s >= start) & ((s < start + seg.length) | last)
            if k == 0:
                mask |= s < 0
            if np.any(mask):
                vals = seg.eval(s[mask] - start)
                for o, val in zip(out, vals):
                    o[mask] = val
            start += seg.length
        return out

    def local_frame(self, t, v):
        """Point, tangents, oriented unit normal and its derivatives."""
        t, v = np.broadcast_arrays(np.asarray(t, float), np.asarray(v, float))
        rho, z, rs, zs, rss, zss = self._profile(t)
        L = self.profile_length
        phi = TWO_PI * v
        c, s = np.cos(phi), np.sin(phi)
        zero = np.zeros_like(rho)
        o = self.orientation
        loc = np.stack([rho * c, rho * s, z], axis=-1)
        xt = L * np.stack([rs * c, rs * s, zs], axis=-1)
        xv = TWO_PI * np.stack([-rho * s, rho * c, zero], axis=-1)
        n = o * np.stack([-zs * c, -zs * s, rs], axis=-1)
        nt = o * L * np.stack([-zss * c, -zss * s, rss], axis=-1)
        nv = o * TWO_PI * np.stack([zs * s, -zs * c, zero], axis=-1)
        Q = self.axes
        return (_frame_apply(Q, self.origin, loc), xt @ Q.T, xv @ Q.T,
                n @ Q.T, nt @ Q.T, nv @ Q.T)

    def _eval(self, t, v):
        p, xt, xv, *_ = self.local_frame(t, v)
        return p, xt, xv

    def transformed(self, rotation, translation) -> "RevolutionPatch":
        Q = np.asarray(rotation, float)
        return RevolutionPatch(self.segments, self.orientation,
                               Q @ self.origin + np.asarray(translation, float), Q @ self.axes)

    def to_dict(self) -> dict:
        return {
            "kind": "revolution",
            "segments": [s.to_dict() for s in self.segments],
            "orientation": self.orientation,
            "origin": self.origin.tolist(),
            "axes": self.axes.tolist(),
        }


# ---------------------------------------------------------------------------
# Radial graph over a reference surface of revolution
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class RadialGraphPatch(ParamPatch):
    """``x(t, v) = x_ref(t, v) + offset(t, v) * n_ref(t, v)``.

    ``offsets`` has shape ``(len(t_knots), n_v)``: rows follow ``t_knots``
    and the columns are uniformly spaced and periodic in ``v``. Positive
    offsets move the surface along the outward reference normal.
    """

    reference: RevolutionPatch
    t_knots: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        knots = np.array(self.t_knots, dtype=float)
        offs = np.array(self.offsets, dtype=float)
        if knots.ndim != 1 or len(knots) < 3 or knots[0] != 0.0 or knots[-1] != 1.0:
            raise ValueError("t_knots must increase from 0 to 1 with at least 3 entries")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("t_knots must be strictly increasing")
        if offs.shape != (len(knots), offs.shape[1]) or offs.shape[1] < 3:
            raise ValueError(f"offsets must have shape ({len(knots)}, n_v>=3), got {offs.shape}")
        knots.setflags(write=False)
        offs.setflags(write=False)
        object.__setattr__(self, "t_knots", knots)
        object.__setattr__(self, "offsets", offs)

    @property
    def orientation(self) -> int:
        return self.reference.orientation

    @property
    def v_knots(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.offsets.shape[1] + 1)

    def offset_bases(self, t, v):
        """Dense tensor bases ``(Bt, dBt, Bv, dBv)`` of the offset field."""
        Bt, dBt = interpolation_basis(self.t_knots, t, "cubic")
        Bv, dBv = interpolation_basis(self.v_knots, v, "cubic", periodic=True)
        return Bt, dBt, Bv, dBv

    def _offset_field(self, t, v):
        ct, bt, dbt = interpolation_stencil(self.t_knots, t, "cubic")
        cv, bv, dbv = interpolation_stencil(self.v_knots, v, "cubic", periodic=True)
        C = self.offsets[ct[..., :, None], cv[..., None, :]]
        d = np.einsum("...a,...ab,...b->...", bt, C, bv)
        dt = np.einsum("...a,...ab,...b->...", dbt, C, bv)
        dv = np.einsum("...a,...ab,...b->...", bt, C, dbv)
        return d, dt, dv

    def offset(self, t, v) -> np.ndarray:
        t, v = np.broadcast_arrays(np.asarray(t, float), np.asarray(v, float))
        return self._offset_field(t, v)[0]

    def _eval(self, t, v):
        p, xt, xv, n, nt, nv = self.reference.local_frame(t, v)
        d, dt, dv = (a[..., None] for a in self._offset_field(t, v))
        return p + d * n, xt + dt * n + d * nt, xv + dv * n + d * nv

    def support(self, row: int, col: int) -> tuple[tuple[float, float], list[tuple[float, float]]]:
        """Parameter region influenced by one control offset.

        Returns the ``t`` interval and a list of ``v`` intervals (the
        periodic wrap may split the support in two).
        """
        k = self.t_knots
        t_lo = k[max(row - 2, 0)]
        t_hi = k[min(row + 2, len(k) - 1)]
        n_v = self.offsets.shape[1]
        if n_v <= 4:
            return (t_lo, t_hi), [(0.0, 1.0)]
        lo = (col - 2) / n_v
        hi = (col + 2) / n_v
        if lo < 0:
            return (t_lo, t_hi), [(0.0, hi), (lo + 1.0, 1.0)]
        if hi > 1:
            return (t_lo, t_hi), [(lo, 1.0), (0.0, hi - 1.0)]
        return (t_lo, t_hi), [(lo, hi)]

    def with_offsets(self, offsets) -> "RadialGraphPatch":
        return RadialGraphPatch(self.reference, self.t_knots, offsets)

    def control_points(self) -> np.ndarray:
        n_v = self.offsets.shape[1]
        tt, vv = np.meshgrid(self.t_knots, np.linspace(0, 1, n_v + 1), indexing="ij")
        p, _, _, n, _, _ = self.reference.local_frame(tt, vv)
        offs = np.concatenate([self.offsets, self.offsets[:, :1]], axis=1)
        return p + offs[..., None] * n

    def transformed(self, rotation, translation) -> "RadialGraphPatch":
        return RadialGraphPatch(self.reference.transformed(rotation, translation),
                                self.t_knots, self.offsets)

    def to_dict(self) -> dict:
        return {
            "kind": "radial_graph",
            "reference": self.reference.to_dict(),
            "t_knots": self.t_knots.tolist(),
            "offsets": self.offsets.tolist(),
        }


def patch_from_dict(d: dict) -> ParamPatch:
    kind = d.get("kind")
    if kind == "grid":
        return GridPatch(np.asarray(d["control_grid"], float), d.get("interpolation", "bicubic"),
                         int(d.get("orientation", 1)), bool(d.get("periodic_v", False)))
    if kind == "revolution":
        return RevolutionPatch(tuple(segment_from_dict(s) for s in d["segments"]),
                               int(d.get("orientation", -1)),
                               np.asarray(d.get("origin", [0, 0, 0]), float),
                               np.asarray(d.get("axes", np.eye(3).tolist()), float))
    if kind == "radial_graph":
        ref = patch_from_dict(d["reference"])
        if not isinstance(ref, RevolutionPatch):
            raise ValueError("radial_graph reference must be a revolution patch")
        return RadialGraphPatch(ref, np.asarray(d["t_knots"], float), np.asarray(d["offsets"], float))
    raise ValueError(f"unknown patch kind {kind!r}")


def evaluate_patch(patch: ParamPatch, t: float, v: float):
    """Point, tangents, unit normal and area element at ``(t, v)``.

    The normal is the normalized cross product of the tangents, flipped by
    the patch orientation; the area element is the length of that cross
    product. Parameters must lie strictly inside the unit square.
    """
    t_arr, v_arr = np.asarray(t, float), np.asarray(v, float)
    if np.any((t_arr <= 0) | (t_arr >= 1) | (v_arr <= 0) | (v_arr >= 1)):
        raise ValueError("(t, v) must lie strictly inside (0, 1)^2")
    p, xt, xv = patch.evaluate(t_arr, v_arr)
    normal, area = normals_and_area(patch, xt, xv)
    return p, xt, xv, normal, area


def normals_and_area(patch: ParamPatch, xt: np.ndarray, xv: np.ndarray):
    cross = np.cross(xt, xv)
    area = np.linalg.norm(cross, axis=-1)
    scale = patch.diameter ** 2
    if np.any(area < 1e-14 * scale):
        raise DegenerateParameterizationError(
            f"area element {float(np.min(area)):.3e} below 1e-14 x patch scale {scale:.3e}")
    return patch.orientation * cross / area[..., None], area


class PointGeometry:
    """Surface geometry at fixed parameter points.

    For a ``RadialGraphPatch`` the reference frame and the offset stencils
    are cached so the geometry for new offsets costs a few array
    operations; other patches are evaluated once.
    """

    def __init__(self, patch: ParamPatch, t, v, cache_frames: bool = True):
        t, v = np.broadcast_arrays(np.asarray(t, float), np.asarray(v, float))
        self.patch = patch
        self.shape = t.shape
        self.radial = isinstance(patch, RadialGraphPatch) and cache_frames
        if self.radial:
            self._frame = patch.reference.local_frame(t, v)
            self._st = interpolation_stencil(patch.t_knots, t, "cubic")
            self._sv = interpolation_stencil(patch.v_knots, v, "cubic", periodic=True)
            self.current = self._combine(patch.offsets)
        else:
            p, xt, xv = patch.evaluate(t, v)
            n, area = normals_and_area(patch, xt, xv)
            self.current = (p, n, area)

    def _combine(self, offsets, idx=None):
        pick = (lambda a: a) if idx is None else (lambda a: a[idx])  # noqa: E731
        p, xt, xv, n, nt, nv = (pick(a) for a in self._frame)
        ct, bt, dbt = (pick(a) for a in self._st)
        cv, bv, dbv = (pick(a) for a in self._sv)
        C = np.asarray(offsets, float)[ct[..., :, None], cv[..., None, :]]
        Cv = np.einsum("...ab,...b->...a", C, bv)
        d = np.einsum("...a,...a->...", bt, Cv)[..., None]
        dt = np.einsum("...a,...a->...", dbt, Cv)[..., None]
        dv = np.einsum("...a,...ab,...b->...", bt, C, dbv)[..., None]
        cross = np.cross(xt + dt * n + d * nt, xv + dv * n + d * nv)
        area = np.linalg.norm(cross, axis=-1)
        scale = self.patch.diameter ** 2
        if np.any(area < 1e-14 * scale):
            raise DegenerateParameterizationError(
                f"area element {float(np.min(area)):.3e} below 1e-14 x patch scale {scale:.3e}")
        return p + d * n, self.patch.orientation * cross / area[..., None], area

    def evaluate(self, offsets=None, idx=None):
        """``(points, unit normals, area elements)``, optionally at ``idx`` only.

        ``offsets`` replaces the wall offsets (radial patches only).
        """
        if offsets is None:
            if idx is None:
                return self.current
            return tuple(a[idx] for a in self.current)
        if not self.radial:
            raise ValueError("offsets given for a patch without cached radial frames")
        return self._combine(offsets, idx)
