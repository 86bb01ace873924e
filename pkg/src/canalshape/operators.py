"""Dense Nystrom matrices of layer potentials with local corrections.

For a source mesh and a set of targets, the matrices ``M`` satisfy
``integral K(x_i, y) sigma(y) ds(y) ~ (M @ sigma)[i]`` where ``sigma`` is
given at the source nodes and interpolated inside each cell by the cell's
Lagrange basis. Three regimes are used per (target, cell):

* far  -- the node rule itself (kernel times quadrature weight);
* near -- adaptive quadtree subdivision of the cell when the target lies
  within ``near_factor`` cell diameters (by default 4 for rules of order
  >= 3, more for lower orders, whose node rule converges slowly with
  distance);
* self -- the Duffy-type rule when the target lies inside the cell.

An ``InteractionPlan`` fixes all quadrature points in parameter space.
Re-evaluating it for perturbed wall offsets reuses the rule and the
cached reference frames, and can refresh only the rows and columns a
perturbation touches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels as kn
from .geometry.mesh import SurfaceMesh
from .geometry.patches import PointGeometry, evaluate_patch

FAR_CHUNK = 400_000
PAIR_CHUNK = 2000
ENTRY_CHUNK = 12_000


@dataclass(frozen=True, eq=False)
class TargetSet:
    """Evaluation points, optionally lying on (hosted by) a mesh."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    host: Optional[SurfaceMesh] = None
    cells: Optional[np.ndarray] = None
    local: Optional[np.ndarray] = None
    uv: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_mesh(cls, mesh: SurfaceMesh) -> "TargetSet":
        return cls(mesh.nodes, mesh.normals, mesh, mesh.cell_of_node, mesh.local_uv, mesh.uv)

    @classmethod
    def on_surface(cls, mesh: SurfaceMesh, t, v) -> "TargetSet":
        """Arbitrary points of ``mesh``'s patch, hosted by ``mesh``."""
        t, v = np.atleast_1d(np.asarray(t, float)), np.atleast_1d(np.asarray(v, float))
        p, _, _, n, _ = evaluate_patch(mesh.patch, t, v)
        cells, local = mesh.locate(t, v)
        return cls(p, n, mesh, cells, local, np.stack([t, v], axis=-1))

    @classmethod
    def free(cls, points, normals=None) -> "TargetSet":
        pts = np.atleast_2d(np.asarray(points, float))
        nrm = None if normals is None else np.atleast_2d(np.asarray(normals, float))
        return cls(pts, nrm)


def cell_nodes(mesh: SurfaceMesh, cells) -> np.ndarray:
    q2 = mesh.nodes_per_cell
    cells = np.asarray(cells, int)
    return (cells[:, None] * q2 + np.arange(q2)[None, :]).ravel()


DEFAULT_NEAR_FACTOR = {1: 12.0, 2: 7.0}


def near_pairs(source: SurfaceMesh, targets: TargetSet,
               near_factor: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """(target, cell) pairs needing corrected quadrature, host cells excluded."""
    if near_factor is None:
        near_factor = DEFAULT_NEAR_FACTOR.get(source.order, 4.0)
    centers, radii = source.cell_centers_radii
    ti, ci = [], []
    step = max(1, FAR_CHUNK // source.n_cells)
    for s in range(0, len(targets), step):
        d = np.linalg.norm(targets.points[s:s + step, None, :] - centers[None], axis=-1)
        a, b = np.nonzero(d < radii[None, :] * (1.0 + 2.0 * near_factor))
        ti.append(a + s)
        ci.append(b)
    ti, ci = np.concatenate(ti), np.concatenate(ci)
    if targets.host is source:
        keep = targets.cells[ti] != ci
        ti, ci = ti[keep], ci[keep]
    return ti, ci


def _check_kinds(kinds: Sequence[str]) -> tuple[str, ...]:
    kinds = tuple(kinds)
    for kd in kinds:
        if kd not in (kn.SINGLE, kn.DOUBLE, kn.ADJOINT, kn.NORMAL_NORMAL):
            raise ValueError(f"only scalar kernels can be assembled, got {kd!r}")
    return kinds


def _cell_param_area(mesh: SurfaceMesh, cells: np.ndarray) -> np.ndarray:
    b = mesh.cell_bounds[cells]
    return (b[..., 0, 1] - b[..., 0, 0]) * (b[..., 1, 1] - b[..., 1, 0])


class InteractionPlan:
    """Quadrature plan for one (source mesh, targets) combination.

    Parameters
    ----------
    source : SurfaceMesh
    targets : TargetSet
        When ``targets.host is source`` the self cells use the singular rule.
    cache_frames : bool
        Keep reference frames so ``evaluate`` accepts new wall offsets.
    """

    def __init__(self, source: SurfaceMesh, targets: TargetSet, near_factor: Optional[float] = None,
                 near_order: int = 6, singular_order: int = 10, eta: float = 2.5,
                 cache_frames: bool = True):
        self.source, self.targets = source, targets
        self.q2 = q2 = source.nodes_per_cell
        self.n_rows, self.n_cols = len(targets), source.n_nodes
        uv = source.uv
        self.src_geo = PointGeometry(source.patch, uv[:, 0], uv[:, 1], cache_frames)
        self.src_wparam = source.weights / self.src_geo.current[2]
        self.tgt_geo = None
        if targets.host is not None and targets.uv is not None:
            self.tgt_geo = PointGeometry(targets.host.patch, targets.uv[:, 0], targets.uv[:, 1],
                                         cache_frames)

        # near pairs and the shared dyadic boxes
        ti, ci = near_pairs(source, targets, near_factor)
        gpts, gw = kn.gauss_square(near_order)
        e_pair, e_key, e_lo, e_size = [], [], [], []
        for s in range(0, len(ti), PAIR_CHUNK):
            pid, key, lo, size = kn.near_boxes(source, targets.points[ti[s:s + PAIR_CHUNK]],
                                               ci[s:s + PAIR_CHUNK], eta)
            e_pair.append(pid + s)
            e_key.append(key)
            e_lo.append(lo)
            e_size.append(size)
        self.pair_row, self.pair_cell = ti, ci
        self.box_geo = None
        self.entry_pair = self.entry_box = np.zeros(0, int)
        if len(ti):
            e_pair, e_key = np.concatenate(e_pair), np.concatenate(e_key)
            e_lo, e_size = np.concatenate(e_lo), np.concatenate(e_size)
            _, first, inv = np.unique(e_key, return_index=True, return_inverse=True)
            self.entry_pair, self.entry_box = e_pair, inv.ravel()
            b_cell = ci[e_pair[first]]
            loc = e_lo[first][:, None, :] + e_size[first][:, None, None] * gpts[None]
            t, v = source.cell_params(b_cell[:, None], loc)
            self.box_geo = PointGeometry(source.patch, t, v, cache_frames)
            wq = e_size[first][:, None] ** 2 * gw[None, :] * _cell_param_area(source, b_cell)[:, None]
            self.box_basis = source.basis(loc) * wq[..., None]

        # self cells
        self.self_rows = np.zeros(0, int)
        if targets.host is source:
            self.self_rows = np.arange(len(targets))
            cells = targets.cells
            pts, wq = kn.duffy_rule(targets.local, singular_order,
                                    source.cell_scales(cells, targets.local))
            t, v = source.cell_params(cells[:, None], pts)
            self.self_geo = PointGeometry(source.patch, t, v, cache_frames)
            self.self_basis = source.basis(pts) * (wq * _cell_param_area(source, cells)[:, None])[..., None]

    # ------------------------------------------------------------------
    def _targets(self, target_offsets):
        if self.tgt_geo is not None:
            x, nx, _ = self.tgt_geo.evaluate(target_offsets)
            return x, nx
        return self.targets.points, self.targets.normals

    def evaluate(self, kinds, k: float, source_offsets=None, target_offsets=None,
                 rows=None, cells=None, base: Optional[dict] = None) -> dict:
        """Matrices ``{kind: (n_targets, n_source_nodes)}``.

        With ``rows``/``cells`` only the entries in those target rows or
        source cells are recomputed; all other entries come from ``base``.
        """
        kinds = _check_kinds(kinds)
        need_nx = kn.ADJOINT in kinds or kn.NORMAL_NORMAL in kinds
        x, nx = self._targets(target_offsets)
        if need_nx and nx is None:
            raise ValueError("target normals required for adjoint kernels")
        y, ny, area = self.src_geo.evaluate(source_offsets)
        w = self.src_wparam * area
        partial = rows is not None or cells is not None
        row_mask = np.zeros(self.n_rows, bool)
        cell_mask = np.zeros(self.source.n_cells, bool)

        def far(xs, nxs, cols):
            vals = kn.kernel_values(kinds, k, xs[:, None, :], None if nxs is None else nxs[:, None, :],
                                    y[cols][None], ny[cols][None])
            return {kd: vals[kd] * w[cols][None, :] for kd in kinds}

        all_cols = np.arange(self.n_cols)
        with np.errstate(divide="ignore", invalid="ignore"):
            if partial:
                if base is None:
                    raise ValueError("partial evaluation needs the base matrices")
                out = {kd: base[kd].copy() for kd in kinds}
                if rows is not None:
                    row_mask[np.asarray(rows, int)] = True
                if cells is not None:
                    cell_mask[np.asarray(cells, int)] = True
                r_idx = np.flatnonzero(row_mask)
                if len(r_idx):
                    blk = far(x[r_idx], None if nx is None else nx[r_idx], all_cols)
                    for kd in kinds:
                        out[kd][r_idx] = blk[kd]
                c_idx = cell_nodes(self.source, np.flatnonzero(cell_mask))
                if len(c_idx):
                    step = max(1, FAR_CHUNK // len(c_idx))
                    for s in range(0, self.n_rows, step):
                        blk = far(x[s:s + step], None if nx is None else nx[s:s + step], c_idx)
                        for kd in kinds:
                            out[kd][s:s + step, c_idx] = blk[kd]
            else:
                out = {kd: np.empty((self.n_rows, self.n_cols), complex) for kd in kinds}
                step = max(1, FAR_CHUNK // self.n_cols)
                for s in range(0, self.n_rows, step):
                    blk = far(x[s:s + step], None if nx is None else nx[s:s + step], all_cols)
                    for kd in kinds:
                        out[kd][s:s + step] = blk[kd]

        self._near(out, kinds, k, x, nx, source_offsets, partial, row_mask, cell_mask)
        self._self(out, kinds, k, x, nx, source_offsets, partial, row_mask, cell_mask)
        return out

    def _near(self, out, kinds, k, x, nx, offsets, partial, row_mask, cell_mask):
        if self.box_geo is None:
            return
        pairs = np.arange(len(self.pair_row))
        entries = np.arange(len(self.entry_pair))
        if partial:
            pairs = np.flatnonzero(row_mask[self.pair_row] | cell_mask[self.pair_cell])
            if len(pairs) == 0:
                return
            entries = np.flatnonzero(np.isin(self.entry_pair, pairs))
        acc = {kd: np.zeros((len(self.pair_row), self.q2), complex) for kd in kinds}
        for s in range(0, len(entries), ENTRY_CHUNK):
            e = entries[s:s + ENTRY_CHUNK]
            boxes, binv = np.unique(self.entry_box[e], return_inverse=True)
            yb, nyb, ab = self.box_geo.evaluate(offsets, boxes)
            basis = self.box_basis[boxes] * ab[..., None]
            pe = self.entry_pair[e]
            rows = self.pair_row[pe]
            vals = kn.kernel_values(kinds, k, x[rows][:, None, :],
                                    None if nx is None else nx[rows][:, None, :],
                                    yb[binv], nyb[binv])
            upair, pinv = np.unique(pe, return_inverse=True)
            # sum over entries and box quadrature points as one sparse product
            ng = basis.shape[1]
            ri = np.repeat(pinv.ravel(), ng)
            ci = (binv.ravel()[:, None] * ng + np.arange(ng)[None, :]).ravel()
            bflat = basis.reshape(-1, self.q2)
            for kd in kinds:
                V = sp.csr_matrix((vals[kd].ravel(), (ri, ci)), shape=(len(upair), bflat.shape[0]))
                acc[kd][upair] += V @ bflat
        r = self.pair_row[pairs]
        c = cell_nodes(self.source, self.pair_cell[pairs]).reshape(len(pairs), self.q2)
        for kd in kinds:
            out[kd][r[:, None], c] = acc[kd][pairs]

    def _self(self, out, kinds, k, x, nx, offsets, partial, row_mask, cell_mask):
        rows = self.self_rows
        if len(rows) == 0:
            return
        if partial:
            rows = rows[row_mask[rows] | cell_mask[self.targets.cells[rows]]]
        step = max(1, ENTRY_CHUNK * 36 // self.self_basis.shape[1])
        for s in range(0, len(rows), step):
            r = rows[s:s + step]
            ys, nys, a = self.self_geo.evaluate(offsets, r)
            vals = kn.kernel_values(kinds, k, x[r][:, None, :],
                                    None if nx is None else nx[r][:, None, :], ys, nys)
            basis = self.self_basis[r] * a[..., None]
            c = cell_nodes(self.source, self.targets.cells[r]).reshape(len(r), self.q2)
            for kd in kinds:
                out[kd][r[:, None], c] = np.einsum("rp,rpj->rj", vals[kd], basis)


def assemble(kinds, k: float, source: SurfaceMesh, targets: TargetSet, **plan_options) -> dict:
    """One-off matrices for ``kinds`` (see ``InteractionPlan``)."""
    plan = InteractionPlan(source, targets, cache_frames=False, **plan_options)
    return plan.evaluate(kinds, k)
