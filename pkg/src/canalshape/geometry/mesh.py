"""Quadrature meshes on parametric patches.

A mesh splits the parameter square into tensor-product cells and places an
``order x order`` open rule in each cell; nodes carry the outward unit
normal and the quadrature weight ``w_a * w_b * cell_size * area_element``.
Node ``cell * order**2 + a * order + b`` sits at the ``a``-th rule point in
``t`` and ``b``-th in ``v`` of its cell. No node lies on a cell edge, so the
seam and polar points are never sampled.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .patches import ParamPatch, normals_and_area

RULES = ("midpoint-tensor", "gauss-legendre-tensor")


def rule_points(rule: str, order: int) -> tuple[np.ndarray, np.ndarray]:
    """1D nodes and weights on (0, 1)."""
    if rule == "midpoint-tensor":
        if order < 1:
            raise ValueError("order must be >= 1")
        x = (np.arange(order) + 0.5) / order
        return x, np.full(order, 1.0 / order)
    if rule == "gauss-legendre-tensor":
        x, w = np.polynomial.legendre.leggauss(order)
        return 0.5 * (x + 1.0), 0.5 * w
    raise ValueError(f"rule must be one of {RULES}, got {rule!r}")


def lagrange_basis(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Values of the 1D Lagrange polynomials on ``nodes`` at ``x``."""
    x = np.asarray(x, float)[..., None]
    out = np.ones(x.shape[:-1] + (len(nodes),))
    for j, xj in enumerate(nodes):
        for m, xm in enumerate(nodes):
            if m != j:
                out[..., j] *= (x[..., 0] - xm) / (xj - xm)
    return out


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    patch: ParamPatch
    t_breaks: np.ndarray
    v_breaks: np.ndarray
    rule: str
    order: int
    nodes: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    uv: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.weights)

    @property
    def n_cells(self) -> int:
        return (len(self.t_breaks) - 1) * (len(self.v_breaks) - 1)

    @property
    def nodes_per_cell(self) -> int:
        return self.order * self.order

    @cached_property
    def rule_nodes(self) -> np.ndarray:
        return rule_points(self.rule, self.order)[0]

    @cached_property
    def cell_bounds(self) -> np.ndarray:
        """``(n_cells, 2, 2)`` array of ``[[t_lo, t_hi], [v_lo, v_hi]]``."""
        nt, nv = len(self.t_breaks) - 1, len(self.v_breaks) - 1
        it, iv = np.divmod(np.arange(nt * nv), nv)
        return np.stack([
            np.stack([self.t_breaks[it], self.t_breaks[it + 1]], axis=-1),
            np.stack([self.v_breaks[iv], self.v_breaks[iv + 1]], axis=-1),
        ], axis=1)

    @cached_property
    def cell_of_node(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_cells), self.nodes_per_cell)

    @cached_property
    def local_uv(self) -> np.ndarray:
        """Unit-cell coordinates of every node."""
        x = self.rule_nodes
        a, b = np.meshgrid(x, x, indexing="ij")
        loc = np.stack([a.ravel(), b.ravel()], axis=-1)
        return np.tile(loc, (self.n_cells, 1))

    @cached_property
    def cell_centers_radii(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical cell centers and bounding radii from a 5x5 sample."""
        s = np.linspace(0.0, 1.0, 5)
        a, b = np.meshgrid(s, s, indexing="ij")
        pts = self.cell_points(np.arange(self.n_cells)[:, None],
                               np.stack([a.ravel(), b.ravel()], axis=-1)[None, :, :])
        center = pts[:, 12]
        radius = np.linalg.norm(pts - center[:, None, :], axis=-1).max(axis=1)
        return center, radius

    def cell_params(self, cells: np.ndarray, local: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map unit-cell coordinates ``local[..., 2]`` of ``cells`` to (t, v)."""
        bnd = self.cell_bounds[cells]
        t = bnd[..., 0, 0] + local[..., 0] * (bnd[..., 0, 1] - bnd[..., 0, 0])
        v = bnd[..., 1, 0] + local[..., 1] * (bnd[..., 1, 1] - bnd[..., 1, 0])
        return t, v

    def cell_points(self, cells, local) -> np.ndarray:
        t, v = self.cell_params(np.asarray(cells), np.asarray(local))
        return self.patch.points(t, v)

    def cell_geometry(self, cells, local):
        """Points, unit normals and area Jacobians w.r.t. unit-cell coordinates."""
        cells = np.asarray(cells)
        t, v = self.cell_params(cells, np.asarray(local))
        p, xt, xv = self.patch.evaluate(t, v)
        n, area = normals_and_area(self.patch, xt, xv)
        bnd = self.cell_bounds[cells]
        scale = (bnd[..., 0, 1] - bnd[..., 0, 0]) * (bnd[..., 1, 1] - bnd[..., 1, 0])
        return p, n, area * scale

    def cell_scales(self, cells, local) -> np.ndarray:
        """Physical lengths of the two cell sides measured at ``local``."""
        cells = np.asarray(cells)
        t, v = self.cell_params(cells, np.asarray(local))
        _, xt, xv = self.patch.evaluate(t, v)
        bnd = self.cell_bounds[cells]
        return np.stack([np.linalg.norm(xt, axis=-1) * (bnd[..., 0, 1] - bnd[..., 0, 0]),
                         np.linalg.norm(xv, axis=-1) * (bnd[..., 1, 1] - bnd[..., 1, 0])], axis=-1)

    def basis(self, local: np.ndarray) -> np.ndarray:
        """Cell interpolation basis at unit-cell coordinates; last axis = order**2."""
        bt = lagrange_basis(self.rule_nodes, local[..., 0])
        bv = lagrange_basis(self.rule_nodes, local[..., 1])
        return (bt[..., :, None] * bv[..., None, :]).reshape(local.shape[:-1] + (self.nodes_per_cell,))

    def locate(self, t: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell index and unit-cell coordinates of parameter points."""
        nt, nv = len(self.t_breaks) - 1, len(self.v_breaks) - 1
        it = np.clip(np.searchsorted(self.t_breaks, t, side="right") - 1, 0, nt - 1)
        iv = np.clip(np.searchsorted(self.v_breaks, v, side="right") - 1, 0, nv - 1)
        lt = (t - self.t_breaks[it]) / (self.t_breaks[it + 1] - self.t_breaks[it])
        lv = (v - self.v_breaks[iv]) / (self.v_breaks[iv + 1] - self.v_breaks[iv])
        return it * nv + iv, np.stack([lt, lv], axis=-1)

    def interpolate(self, values: np.ndarray, t, v) -> np.ndarray:
        """Evaluate nodal values at parameter points with the cell basis."""
        cells, local = self.locate(np.asarray(t, float), np.asarray(v, float))
        vals = np.asarray(values).reshape(self.n_cells, self.nodes_per_cell)
        return np.einsum("...j,...j->...", self.basis(local), vals[cells])

    @cached_property
    def fingerprint(self) -> str:
        """Hash of the discretization (patch, breaks, rule, order)."""
        payload = json.dumps({
            "patch": self.patch.to_dict(),
            "t_breaks": np.round(self.t_breaks, 14).tolist(),
            "v_breaks": np.round(self.v_breaks, 14).tolist(),
            "rule": self.rule,
            "order": self.order,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @property
    def total_area(self) -> float:
        return float(self.weights.sum())


def graded_breaks(n_cells: int, ratio: float = 1.0) -> np.ndarray:
    """Cell breaks on [0, 1] whose sizes grow geometrically by ``ratio``."""
    if n_cells < 1:
        raise ValueError("need at least one cell")
    sizes = ratio ** np.arange(n_cells)
    b = np.concatenate([[0.0], np.cumsum(sizes)])
    b /= b[-1]
    b[-1] = 1.0
    return b


def subdivide_breaks(breaks: np.ndarray, factor: int) -> np.ndarray:
    """Split every interval into ``factor`` equal pieces (nested refinement)."""
    breaks = np.asarray(breaks, float)
    fr = np.arange(factor) / factor
    inner = (breaks[:-1, None] + fr[None, :] * np.diff(breaks)[:, None]).ravel()
    return np.concatenate([inner, breaks[-1:]])


def build_mesh(
    patch: ParamPatch,
    res_t: int,
    res_v: int,
    rule: str = "gauss-legendre-tensor",
    order: int = 3,
    t_breaks=None,
    v_breaks=None,
) -> SurfaceMesh:
    """Tensor-product quadrature mesh with ``res_t x res_v`` cells.

    ``t_breaks``/``v_breaks`` override the uniform cell boundaries (their
    lengths must agree with the resolutions).
    """
    if res_t < 2 or res_v < 2:
        raise ValueError(f"mesh resolutions must be >= 2, got ({res_t}, {res_v})")
    if rule == "midpoint-tensor" and order != 1:
        order = 1
    tb = np.linspace(0, 1, res_t + 1) if t_breaks is None else np.asarray(t_breaks, float)
    vb = np.linspace(0, 1, res_v + 1) if v_breaks is None else np.asarray(v_breaks, float)
    if len(tb) != res_t + 1 or len(vb) != res_v + 1:
        raise ValueError("breaks do not match the requested resolution")
    x, w = rule_points(rule, order)
    nt, nv = res_t, res_v
    it, iv = np.divmod(np.arange(nt * nv), nv)
    ht, hv = np.diff(tb)[it], np.diff(vb)[iv]
    a, b = np.meshgrid(np.arange(order), np.arange(order), indexing="ij")
    a, b = a.ravel(), b.ravel()
    t = (tb[it][:, None] + x[a][None, :] * ht[:, None]).ravel()
    v = (vb[iv][:, None] + x[b][None, :] * hv[:, None]).ravel()
    wq = ((w[a] * w[b])[None, :] * (ht * hv)[:, None]).ravel()
    p, xt, xv = patch.evaluate(t, v)
    n, area = normals_and_area(patch, xt, xv)
    arrays = [np.ascontiguousarray(arr) for arr in (tb, vb, p, n, wq * area, np.stack([t, v], axis=-1))]
    for arr in arrays:
        arr.setflags(write=False)
    tb, vb, p, n, weights, uv = arrays
    return SurfaceMesh(patch, tb, vb, rule, order, p, n, weights, uv)
