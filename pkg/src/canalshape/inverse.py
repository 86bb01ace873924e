"""Recovering the wall from Cauchy data on the membrane.

The unknowns are radial offsets of the wall control grid (the seam row
and the tip row stay fixed) and one density ``H`` per excitation. For a
wall shape and datum ``(f, h)`` the four residual blocks are

* ``R1 = u - f`` on F (interior trace of ``U`` plus ``V``),
* ``R2 = u_N - h`` on F,
* ``R3 = u`` on G,
* ``R4 = H - u_coeff U_N - a_coeff A H`` on G,

weighted by square roots of the quadrature weights so that Euclidean
norms approximate L2 norms. All blocks are affine in ``H``; by default
``H`` is eliminated by linear least squares (variable projection) and
Gauss-Newton runs on the shape parameters only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from . import kernels as kn
from .forward import InadmissibleWavenumberError, InverseCrimeError, MeshSpec, solve_dirichlet
from .geometry.canal import CanalGeometry
from .geometry.mesh import SurfaceMesh, build_mesh
from .geometry.patches import PointGeometry, RadialGraphPatch
from .geometry.width import check_wavenumber
from .operators import InteractionPlan, TargetSet, assemble
from .potentials import (
    CauchyDatum,
    DataMismatchError,
    Density,
    JumpConvention,
    double_layer_normal_trace,
    jump_convention,
    stack_data,
)

log = logging.getLogger(__name__)

BLOCKS = ("R1", "R2", "R3", "R4")


class StepSizeError(ValueError):
    """A finite-difference Jacobian column vanished (step lost in round-off)."""


@dataclass
class InverseOptions:
    """Regularization, stopping and safety settings.

    ``tikhonov_lambda``, ``smoothness_mu`` and ``lm_damping`` are relative
    to the largest diagonal entry of ``J^T J``.
    """

    tikhonov_lambda: float = 1e-2
    lambda_min: float = 1e-4
    smoothness_mu: float = 1e-3
    lm_damping: float = 1e-3
    fd_step: float = 1e-5
    tol_abs: float = 1e-8
    tol_rel: float = 1e-4
    max_iters: int = 50
    max_backtracks: int = 20
    variable_projection: bool = True
    noise_level: Optional[float] = None
    discrepancy_tau: float = 1.5
    use_model_error: bool = True
    replan_tol: float = 0.02
    divergence_factor: float = 10.0
    check_k: bool = True
    allow_inverse_crime: bool = False
    active_rows: Optional[tuple[int, ...]] = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Shape parameters
# ---------------------------------------------------------------------------
class ShapeParametrization:
    """Vector of free radial offsets <-> full offset grid of the wall."""

    def __init__(self, wall: RadialGraphPatch, rows: Optional[Sequence[int]] = None):
        if not isinstance(wall, RadialGraphPatch):
            raise TypeError("inversion needs a radial-graph wall")
        self.wall = wall
        n_t, self.n_v = wall.offsets.shape
        self.rows = tuple(range(1, n_t - 1)) if rows is None else tuple(int(r) for r in rows)
        if any(r <= 0 or r >= n_t - 1 for r in self.rows):
            raise ValueError("seam and tip rows cannot be shape parameters")
        self.base = np.array(wall.offsets, float)

    @property
    def size(self) -> int:
        return len(self.rows) * self.n_v

    def index(self, j: int) -> tuple[int, int]:
        return self.rows[j // self.n_v], j % self.n_v

    def params(self, offsets) -> np.ndarray:
        return np.asarray(offsets, float)[list(self.rows)].ravel()

    def offsets(self, params) -> np.ndarray:
        off = self.base.copy()
        off[list(self.rows)] = np.asarray(params, float).reshape(len(self.rows), self.n_v)
        return off

    def smoothing(self) -> np.ndarray:
        """Second differences along ``t`` (within the free rows) and periodic ``v``."""
        n_r, n_v = len(self.rows), self.n_v
        ops = []
        for i in range(n_r):
            for j in range(n_v):
                row = np.zeros((n_r, n_v))
                row[i, (j - 1) % n_v] += 1
                row[i, j] -= 2
                row[i, (j + 1) % n_v] += 1
                ops.append(row.ravel())
        for i in range(1, n_r - 1):
            for j in range(n_v):
                row = np.zeros((n_r, n_v))
                row[i - 1, j] += 1
                row[i, j] -= 2
                row[i + 1, j] += 1
                ops.append(row.ravel())
        return np.array(ops)


# ---------------------------------------------------------------------------
# Residual model
# ---------------------------------------------------------------------------
@dataclass
class ResidualBlocks:
    """Weighted residual blocks, one list entry per excitation."""

    R1: list
    R2: list
    R3: list
    R4: list

    def norms(self) -> dict:
        return {b: float(np.sqrt(sum(np.sum(np.abs(x) ** 2) for x in getattr(self, b))))
                for b in BLOCKS}

    def stacked(self) -> np.ndarray:
        return np.concatenate([np.concatenate([self.R1[e], self.R2[e], self.R3[e], self.R4[e]])
                               for e in range(len(self.R1))])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.stacked()))


@dataclass
class Operators:
    """Shape-dependent matrices for one wall configuration."""

    offsets: np.ndarray
    GG: dict
    GF: dict
    FG: dict
    wG: np.ndarray


def _datum_norm(d: CauchyDatum, mesh: SurfaceMesh) -> float:
    w = mesh.weights
    return math.sqrt(float(np.sum(w * (np.abs(d.f_values) ** 2 + np.abs(d.h_values) ** 2))))


class ResidualModel:
    """Discrete four-block system for a fixed membrane mesh and data set."""

    def __init__(self, data: Sequence[CauchyDatum], wall: RadialGraphPatch, mesh_spec: MeshSpec,
                 convention: Optional[JumpConvention] = None):
        self.data = list(data)
        self.k, self.mesh_F = stack_data(self.data)
        self.spec = mesh_spec
        self.conv = convention or jump_convention()
        self.wall0 = wall
        p, o = wall.reference.points(0.5, 0.0), wall.reference.origin
        self.radius = float(np.hypot(p[0] - o[0], p[1] - o[1]))
        nt, nv = mesh_spec.wall
        self.mesh_G0 = build_mesh(wall, nt * mesh_spec.refine, nv * mesh_spec.refine, mesh_spec.rule,
                                  mesh_spec.order, mesh_spec._breaks(nt, mesh_spec.wall_grading),
                                  mesh_spec._breaks(nv, 1.0))
        k, F = self.k, self.mesh_F
        MF = assemble((kn.SINGLE, kn.DOUBLE, kn.ADJOINT), k, F, TargetSet.from_mesh(F))
        self._MF, self._T = MF, double_layer_normal_trace(F, k)
        self.sqrt_wF = np.sqrt(F.weights)
        # linear maps h -> (c1, c2) for noise propagation
        self.C1h = MF[kn.SINGLE]
        self.C2h = MF[kn.ADJOINT] + (0.5 * self.conv.sigma_jump - 1.0) * np.eye(F.n_nodes)
        self._set_data(self.data)
        self.set_wall(wall.offsets)

    def _set_data(self, data: Sequence[CauchyDatum]) -> None:
        """Shape-independent parts of R1 and R2 for each datum."""
        MF, T = self._MF, self._T
        ds, sj = self.conv.double_sign, self.conv.sigma_jump
        self.data = list(data)
        self.c1, self.c2 = [], []
        for d in self.data:
            f, h = d.f_values, d.h_values
            self.c1.append(MF[kn.SINGLE] @ h - MF[kn.DOUBLE] @ f - 0.5 * ds * f - f)
            self.c2.append(MF[kn.ADJOINT] @ h + 0.5 * sj * h - T @ f - h)

    def consistency_floor(self, geometry: CanalGeometry) -> float:
        """Residual the discretization leaves for its own exact data.

        Data are synthesized on the inversion meshes for ``geometry`` (whose
        wall must be the current one) and the projected residual is scaled
        to the size of the actual data. It estimates the part of the
        residual no shape change can remove.
        """
        saved = self.data
        total = 0.0
        try:
            for d in saved:
                sol = solve_dirichlet(geometry, d.f_values, self.k, self.spec, check_k=False)
                own = CauchyDatum(self.k, d.f_values, sol.u_N_on_F, self.mesh_F, {})
                self._set_data([own])
                _, blocks = self.project(self.ops)
                scale = _datum_norm(d, self.mesh_F) / _datum_norm(own, self.mesh_F)
                total += (blocks.norm * scale) ** 2
        finally:
            self._set_data(saved)
        return math.sqrt(total)

    # -- plans -----------------------------------------------------------
    def set_wall(self, offsets) -> None:
        """Build interaction plans around the wall with ``offsets``."""
        wall = self.wall0.with_offsets(offsets)
        G = build_mesh(wall, len(self.mesh_G0.t_breaks) - 1, len(self.mesh_G0.v_breaks) - 1,
                       self.spec.rule, self.spec.order, self.mesh_G0.t_breaks, self.mesh_G0.v_breaks)
        self.mesh_G = G
        TG = TargetSet.from_mesh(G)
        self.plan_GG = InteractionPlan(G, TG)
        self.plan_GF = InteractionPlan(G, TargetSet.from_mesh(self.mesh_F))
        self.plan_FG = InteractionPlan(self.mesh_F, TG)
        self.ops = self.operators(np.asarray(offsets, float))

    def operators(self, offsets, base: Optional[Operators] = None, rows=None, cells=None) -> Operators:
        k = self.k
        off = np.asarray(offsets, float)
        partial = base is not None
        GG = self.plan_GG.evaluate((kn.SINGLE, kn.ADJOINT), k, off, off,
                                   rows=rows, cells=cells, base=base.GG if partial else None) \
            if not partial or rows is not None or cells is not None else base.GG
        GF = self.plan_GF.evaluate((kn.SINGLE, kn.ADJOINT), k, off, None,
                                   cells=cells, base=base.GF if partial else None) \
            if not partial or cells is not None else base.GF
        FG = self.plan_FG.evaluate((kn.SINGLE, kn.DOUBLE, kn.ADJOINT, kn.NORMAL_NORMAL), k, None, off,
                                   rows=rows, base=base.FG if partial else None) \
            if not partial or rows is not None else base.FG
        area = self.plan_GG.src_geo.evaluate(off)[2]
        return Operators(off, GG, GF, FG, np.sqrt(self.plan_GG.src_wparam * area))

    # -- residuals -------------------------------------------------------
    def system(self, ops: Operators):
        """Weighted ``B`` (shared) and ``c_e`` per excitation with ``r_e = B H + c_e``."""
        wF, wG = self.sqrt_wF[:, None], ops.wG[:, None]
        n_G = len(ops.wG)
        A = 2.0 * ops.GG[kn.ADJOINT]
        B = np.vstack([wF * ops.GF[kn.SINGLE], wF * ops.GF[kn.ADJOINT],
                       wG * ops.GG[kn.SINGLE], wG * (np.eye(n_G) - self.conv.a_coeff * A)])
        cs = []
        for e, d in enumerate(self.data):
            f, h = d.f_values, d.h_values
            U = ops.FG[kn.SINGLE] @ h - ops.FG[kn.DOUBLE] @ f
            U_N = ops.FG[kn.ADJOINT] @ h - ops.FG[kn.NORMAL_NORMAL] @ f
            cs.append(np.concatenate([self.sqrt_wF * self.c1[e], self.sqrt_wF * self.c2[e],
                                      ops.wG * U, -ops.wG * self.conv.u_coeff * U_N]))
        return B, cs

    def _split(self, r: np.ndarray) -> list[np.ndarray]:
        nF, nG = self.mesh_F.n_nodes, self.mesh_G.n_nodes
        return [r[:nF], r[nF:2 * nF], r[2 * nF:2 * nF + nG], r[2 * nF + nG:]]

    def blocks(self, ops: Operators, densities: Sequence[np.ndarray]) -> ResidualBlocks:
        B, cs = self.system(ops)
        parts = [self._split(B @ H + c) for H, c in zip(densities, cs)]
        return ResidualBlocks(*[[p[i] for p in parts] for i in range(4)])

    def project(self, ops: Operators):
        """Optimal densities and projected residual blocks."""
        B, cs = self.system(ops)
        Q, R = sla.qr(B, mode="economic")
        dens, parts = [], []
        for c in cs:
            qc = Q.conj().T @ c
            dens.append(-sla.solve_triangular(R, qc))
            parts.append(self._split(c - Q @ qc))
        return dens, ResidualBlocks(*[[p[i] for p in parts] for i in range(4)])

    def noise_residual(self, ops: Operators, level: float) -> float:
        """Expected projected-residual norm caused by relative noise ``level`` in ``h``."""
        B, _ = self.system(ops)
        Q, _ = sla.qr(B, mode="economic")
        wF = self.sqrt_wF[:, None]
        Ch = np.vstack([wF * self.C1h, wF * self.C2h,
                        ops.wG[:, None] * ops.FG[kn.SINGLE],
                        -ops.wG[:, None] * self.conv.u_coeff * ops.FG[kn.ADJOINT]])
        P = Ch - Q @ (Q.conj().T @ Ch)
        fro2 = float(np.sum(np.abs(P) ** 2))
        total = 0.0
        for d in self.data:
            w = self.mesh_F.weights
            rms2 = float(np.sum(w * np.abs(d.h_values) ** 2) / np.sum(w))
            total += level ** 2 * rms2 * fro2
        return math.sqrt(total)

    def data_norm(self) -> float:
        return math.sqrt(sum(_datum_norm(d, self.mesh_F) ** 2 for d in self.data))

    # -- locality of one control offset --------------------------------------
    def support(self, row: int, col: int) -> tuple[np.ndarray, np.ndarray]:
        """G-node rows and G cells influenced by control offset ``(row, col)``."""
        (t0, t1), vints = self.wall0.support(row, col)
        G = self.mesh_G
        t, v = G.uv[:, 0], G.uv[:, 1]
        in_v = np.zeros(len(t), bool)
        cb = G.cell_bounds
        c_v = np.zeros(G.n_cells, bool)
        for lo, hi in vints:
            in_v |= (v >= lo) & (v <= hi)
            c_v |= (cb[:, 1, 1] > lo) & (cb[:, 1, 0] < hi)
        rows = np.flatnonzero((t >= t0) & (t <= t1) & in_v)
        cells = np.flatnonzero((cb[:, 0, 1] > t0) & (cb[:, 0, 0] < t1) & c_v)
        return rows, cells


# ---------------------------------------------------------------------------
# Jacobians and steps
# ---------------------------------------------------------------------------
def _realify(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real, z.imag])


@dataclass
class InverseState:
    params: np.ndarray
    densities: list
    regularization: dict
    history: list = field(default_factory=list)

    def offsets(self, shape: ShapeParametrization) -> np.ndarray:
        return shape.offsets(self.params)


def projected_residual(model: ResidualModel, offsets) -> tuple[np.ndarray, list, ResidualBlocks]:
    """Stacked residual with the densities eliminated, for the wall ``offsets``."""
    dens, blocks = model.project(model.operators(offsets))
    return blocks.stacked(), dens, blocks


def _fd_columns(model: ResidualModel, shape: ShapeParametrization, params: np.ndarray,
                densities: Sequence[np.ndarray], fd_step: float) -> np.ndarray:
    """Central differences of the stacked residual with the densities held fixed."""
    radius = model.radius
    h = fd_step * radius
    off0 = shape.offsets(params)
    base = model.ops if np.array_equal(model.ops.offsets, off0) else model.operators(off0)
    cols = []
    for j in range(shape.size):
        row, col = shape.index(j)
        rows, cells = model.support(row, col)
        res = []
        for sgn in (1.0, -1.0):
            off = off0.copy()
            off[row, col] += sgn * h
            res.append(model.blocks(model.operators(off, base, rows, cells), densities).stacked())
        d = res[0] - res[1]
        scale = max(float(np.linalg.norm(res[0])), 1e-300)
        if float(np.linalg.norm(d)) <= 64 * np.finfo(float).eps * scale:
            raise StepSizeError(f"finite-difference column {j} is below round-off; increase fd_step")
        cols.append(d / (2 * h))
    return np.column_stack(cols)


def shape_jacobian(model: ResidualModel, shape: ShapeParametrization, params: np.ndarray,
                   densities: Sequence[np.ndarray], fd_step: float = 1e-5) -> np.ndarray:
    """Jacobian of the projected residual with respect to the shape parameters.

    Uses the Kaufman form: shape derivatives of the full residual at the
    optimal densities, projected onto the complement of the range of the
    density coefficient matrix. Only matrix rows and columns inside the
    support of each control offset are recomputed.
    """
    Jf = _fd_columns(model, shape, params, densities, fd_step)
    B, _ = model.system(model.ops if np.array_equal(model.ops.offsets, shape.offsets(params))
                        else model.operators(shape.offsets(params)))
    Q, _ = sla.qr(B, mode="economic")
    m = B.shape[0]
    out = np.empty_like(Jf)
    for e in range(len(densities)):
        blk = Jf[e * m:(e + 1) * m]
        out[e * m:(e + 1) * m] = blk - Q @ (Q.conj().T @ blk)
    return out


def full_jacobian(model: ResidualModel, shape: ShapeParametrization, params: np.ndarray,
                  densities: Sequence[np.ndarray], fd_step: float = 1e-5) -> np.ndarray:
    """Jacobian of the stacked residual with respect to (shape, densities).

    Density columns are the affine coefficient matrix itself (block
    diagonal over excitations); shape columns are central differences.
    """
    Js = _fd_columns(model, shape, params, densities, fd_step)
    B, _ = model.system(model.operators(shape.offsets(params)))
    return np.hstack([Js, sla.block_diag(*([B] * len(densities)))])


def damped_step(J: np.ndarray, r: np.ndarray, lam: float, mu: float, nu: float,
                smoothing: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve ``(J^H J + (lam + nu) d I + mu d S^T S) delta = -Re(J^H r)``.

    ``d`` is the largest diagonal entry of ``J^H J``, which makes the
    regularization weights dimensionless. The unknowns are real, so the
    real parts of the complex normal equations are used. ``smoothing``
    may act on a leading subset of the unknowns.
    """
    Jr, rr = _realify(J), _realify(r)
    JTJ = Jr.T @ Jr
    n = JTJ.shape[0]
    d = float(np.max(np.diag(JTJ))) if n else 0.0
    d = d if d > 0 else 1.0
    M = JTJ + (lam + nu) * d * np.eye(n)
    if smoothing is not None and mu > 0:
        m = smoothing.shape[1]
        M[:m, :m] += mu * d * smoothing.T @ smoothing
    g = Jr.T @ rr
    if not np.any(g):
        return np.zeros(n)
    return -np.linalg.solve(M, g)


@dataclass
class StepReport:
    accepted: bool
    alpha: float
    step_norm: float
    residual_before: float
    residual_after: float
    backtracks: int
    stagnated: bool = False


def _pack(params: np.ndarray, densities: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([params] + [np.concatenate([H.real, H.imag]) for H in densities])


def _unpack(x: np.ndarray, n_shape: int, n_dens: int, n_exc: int):
    params = x[:n_shape]
    dens = []
    for e in range(n_exc):
        seg = x[n_shape + 2 * e * n_dens:n_shape + 2 * (e + 1) * n_dens]
        dens.append(seg[:n_dens] + 1j * seg[n_dens:])
    return params, dens


def current_residual(model: ResidualModel, shape: ShapeParametrization, state: InverseState,
                     options: InverseOptions) -> tuple[np.ndarray, list, ResidualBlocks]:
    """Stacked residual of ``state`` (densities re-solved under variable projection)."""
    off = shape.offsets(state.params)
    ops = model.ops if np.array_equal(model.ops.offsets, off) else model.operators(off)
    if options.variable_projection:
        dens, blocks = model.project(ops)
    else:
        dens = list(state.densities)
        blocks = model.blocks(ops, dens)
    return blocks.stacked(), dens, blocks


def gauss_newton_step(model: ResidualModel, shape: ShapeParametrization, state: InverseState,
                      options: InverseOptions, J: Optional[np.ndarray] = None
                      ) -> tuple[InverseState, StepReport]:
    """One damped Gauss-Newton step with backtracking on the stacked residual.

    Returns the state unchanged with ``stagnated=True`` when no step
    length down to ``2**-max_backtracks`` decreases the residual.
    """
    reg = dict(state.regularization)
    r0, dens0, _ = current_residual(model, shape, state, options)
    n0 = float(np.linalg.norm(r0))
    vp = options.variable_projection
    if J is None:
        J = (shape_jacobian(model, shape, state.params, dens0, options.fd_step) if vp
             else full_jacobian(model, shape, state.params, dens0, options.fd_step))
    if not vp:
        n_s = shape.size
        Jd = J[:, n_s:]
        J = np.hstack([J[:, :n_s], Jd, 1j * Jd]) if Jd.shape[1] else J
        # reorder density columns as (Re H_e, Im H_e) per excitation
        n_g = model.mesh_G.n_nodes
        n_e = len(dens0)
        order = list(range(n_s))
        for e in range(n_e):
            order += [n_s + e * n_g + i for i in range(n_g)]
            order += [n_s + (n_e + e) * n_g + i for i in range(n_g)]
        J = J[:, order]
    delta = damped_step(J, r0, reg["lambda"], reg["mu"], reg["nu"], shape.smoothing())
    x0 = state.params if vp else _pack(state.params, dens0)
    alpha, tries = 1.0, 0
    while tries <= options.max_backtracks:
        x = x0 + alpha * delta
        if vp:
            params, dens = x, None
        else:
            params, dens = _unpack(x, shape.size, model.mesh_G.n_nodes, len(dens0))
        try:
            trial = InverseState(params, dens, reg, state.history)
            r1, dens1, _ = current_residual(model, shape, trial, options)
            n1 = float(np.linalg.norm(r1))
        except ValueError:
            n1 = math.inf
        if n1 < n0:
            reg["nu"] = max(reg["nu"] / 10.0, 1e-12) if tries == 0 else reg["nu"] * 10.0
            new = InverseState(params, dens1, reg, state.history)
            step = float(np.linalg.norm(alpha * delta[:shape.size]))
            return new, StepReport(True, alpha, step, n0, n1, tries)
        alpha *= 0.5
        tries += 1
    reg["nu"] *= 10.0
    return (InverseState(state.params, dens0, reg, state.history),
            StepReport(False, 0.0, 0.0, n0, n0, options.max_backtracks, stagnated=True))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------
@dataclass
class ReconstructionResult:
    geometry: CanalGeometry
    densities: list
    history: list
    status: str
    iterations: int
    residual_initial: float
    residual_final: float
    block_norms: dict
    target: Optional[float] = None
    admissibility: Optional[dict] = None
    provenance: list = field(default_factory=list)

    @property
    def reduction(self) -> float:
        return self.residual_initial / self.residual_final if self.residual_final > 0 else math.inf


def check_provenance(data: Sequence[CauchyDatum], inversion_hashes: Sequence[str] = (),
                     allow_inverse_crime: bool = False) -> None:
    """Refuse data generated on any mesh the inversion uses."""
    if allow_inverse_crime:
        return
    for d in data:
        gen = set(d.provenance.get("generation_hashes", []))
        if gen & ({d.mesh_hash} | set(inversion_hashes)) or int(d.provenance.get("fine_factor", 2)) < 2:
            raise InverseCrimeError("data were generated on the inversion discretization "
                                    "(override with allow_inverse_crime)")


def reconstruct(data: Sequence[CauchyDatum], initial: CanalGeometry,
                options: InverseOptions = InverseOptions(), mesh_spec: MeshSpec = MeshSpec(),
                callback=None) -> ReconstructionResult:
    """Regularized Gauss-Newton reconstruction of the wall from Cauchy data.

    Stops when the residual is below ``tol_abs`` times the data norm,
    when it has decreased by less than ``tol_rel`` over three iterations,
    when it reaches the discrepancy target (``discrepancy_tau`` times the
    residual expected from data noise and model error), on stagnation at
    ``lambda_min``, on divergence, or after ``max_iters`` steps.
    """
    if not data:
        raise ValueError("at least one datum is required")
    k, mesh_F = stack_data(data)
    report = None
    if options.check_k:
        rep = check_wavenumber(k, initial)
        report = rep.to_dict()
        if not rep.admissible:
            raise InadmissibleWavenumberError(rep)
    if mesh_spec.membrane_mesh(initial).fingerprint != mesh_F.fingerprint:
        raise DataMismatchError("data F mesh does not match the inversion membrane mesh")
    model = ResidualModel(data, initial.wall, mesh_spec)
    check_provenance(data, [model.mesh_G0.fingerprint], options.allow_inverse_crime)
    shape = ShapeParametrization(initial.wall, options.active_rows)
    reg = {"lambda": options.tikhonov_lambda, "mu": options.smoothness_mu, "nu": options.lm_damping}
    dens, blocks = model.project(model.ops)
    state = InverseState(shape.params(initial.wall.offsets), dens, reg)
    if not options.variable_projection:
        blocks = model.blocks(model.ops, dens)
    r_init = r_cur = blocks.norm
    tol = options.tol_abs * model.data_norm()
    noise = model.noise_residual(model.ops, options.noise_level) if options.noise_level else 0.0
    floor = model.consistency_floor(initial) if options.use_model_error else 0.0
    target = options.discrepancy_tau * math.hypot(noise, floor) if noise or floor else None

    def record(it, blocks, total, step=0.0, alpha=0.0):
        row = {"iteration": it, **blocks.norms(), "total": total,
               "lambda": state.regularization["lambda"], "nu": state.regularization["nu"],
               "step_norm": step, "alpha": alpha}
        state.history.append(row)
        return row

    record(0, blocks, r_init)
    log.info("initial residual %.4e (abs tol %.3e%s)", r_init, tol,
             "" if target is None else f", discrepancy target {target:.3e}")
    best = (r_init, state)
    planned = shape.offsets(state.params)
    status, accepted = "max-iters", 0
    for it in range(1, options.max_iters + 1):
        if r_cur <= tol:
            status = "converged-abs"
            break
        if target is not None and r_cur <= target:
            status = "discrepancy"
            break
        state, rep = gauss_newton_step(model, shape, state, options)
        if rep.stagnated:
            lam = state.regularization["lambda"]
            if lam > options.lambda_min:
                state.regularization["lambda"] = max(lam / 10.0, options.lambda_min)
                log.info("iter %d: no decrease, lambda -> %.1e", it, state.regularization["lambda"])
                record(it, blocks, r_cur)
                continue
            status = "stagnation"
            break
        accepted += 1
        offsets = shape.offsets(state.params)
        if np.max(np.abs(offsets - planned)) > options.replan_tol * model.radius:
            model.set_wall(offsets)
            planned = offsets
        r_vec, dens, blocks = current_residual(model, shape, state, options)
        state.densities = dens
        prev, r_cur = r_cur, float(np.linalg.norm(r_vec))
        if r_cur > options.divergence_factor * best[0]:
            status = "diverged"
            log.warning("residual %.3e exceeds %g x best %.3e", r_cur, options.divergence_factor, best[0])
            state = best[1]
            break
        if r_cur < best[0]:
            best = (r_cur, state)
        lam = state.regularization["lambda"]
        if (prev - r_cur) < 0.01 * prev and lam > options.lambda_min:
            state.regularization["lambda"] = max(lam / 10.0, options.lambda_min)
        row = record(it, blocks, r_cur, rep.step_norm, rep.alpha)
        log.info("iter %d: residual %.4e (alpha %.3g, |step| %.3e, lambda %.1e)", it, r_cur,
                 rep.alpha, rep.step_norm, row["lambda"])
        if callback is not None:
            callback(it, state, row)
        totals = [h["total"] for h in state.history]
        if len(totals) >= 4 and (totals[-4] - r_cur) < options.tol_rel * totals[-4]:
            status = "converged-rel"
            break
    else:
        if r_cur <= tol:
            status = "converged-abs"
        elif target is not None and r_cur <= target:
            status = "discrepancy"
    final_offsets = shape.offsets(state.params)
    if not np.array_equal(planned, final_offsets):
        model.set_wall(final_offsets)
        r_vec, state.densities, blocks = current_residual(model, shape, state, options)
        r_cur = float(np.linalg.norm(r_vec))
    geometry = initial.with_wall(initial.wall.with_offsets(final_offsets))
    densities = [Density(H, model.mesh_G) for H in state.densities]
    log.info("finished: %s after %d accepted steps, residual %.4e -> %.4e", status, accepted,
             r_init, r_cur)
    return ReconstructionResult(geometry, densities, state.history, status, accepted, r_init, r_cur,
                                blocks.norms(), target, report, [d.provenance for d in data])


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------
def radial_error(wall: RadialGraphPatch, truth: RadialGraphPatch, radius: float,
                 res: tuple[int, int] = (48, 24), region: Optional[tuple[float, float]] = None) -> float:
    """Area-weighted mean ``|offset - offset_true|`` over the wall, divided by ``radius``.

    ``region`` restricts the average to a ``t`` interval.
    """
    ref = RadialGraphPatch(wall.reference, wall.t_knots, np.zeros_like(wall.offsets))
    m = build_mesh(ref, res[0], res[1], order=2)
    t, v = m.uv[:, 0], m.uv[:, 1]
    w = m.weights.copy()
    if region is not None:
        w = w * ((t >= region[0]) & (t <= region[1]))
    err = np.abs(wall.offset(t, v) - truth.offset(t, v))
    return float(np.sum(w * err) / np.sum(w) / radius)


def write_history(history: Sequence[dict], path, header: Optional[dict] = None) -> None:
    """History as CSV; ``header`` entries become leading ``# key: value`` lines."""
    cols = ["iteration", *BLOCKS, "total", "lambda", "nu", "step_norm", "alpha"]
    with open(path, "w", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}: {val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for h in history:
            w.writerow([h["iteration"]] + [repr(float(h[c])) for c in cols[1:]])
