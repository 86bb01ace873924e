"""Forward mixed Dirichlet problem and synthetic Cauchy data.

The field is a single-layer potential over the whole boundary,
``u = int_S g sigma ds``; its trace is set to ``f`` on the membrane and
to ``0`` on the wall. The dense first-kind system is solved by LU when
its condition estimate is moderate and by truncated SVD otherwise. The
normal derivative ``h = u_N`` follows from the calibrated jump relation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Union

import numpy as np
import scipy.linalg as sla

from . import kernels as kn
from .geometry.canal import CanalGeometry
from .geometry.mesh import SurfaceMesh, build_mesh, graded_breaks, subdivide_breaks
from .geometry.width import AdmissibilityReport, check_wavenumber
from .operators import TargetSet, assemble
from .potentials import CauchyDatum, JumpConvention, jump_convention

log = logging.getLogger(__name__)

TSVD_RTOL = 1e-10
COND_MAX = 1e12


class NearResonanceError(RuntimeError):
    """The discrete system is too ill-conditioned to trust."""


class InadmissibleWavenumberError(ValueError):
    """``k**2`` fails the width test; carries the report."""

    def __init__(self, report: AdmissibilityReport):
        super().__init__(f"k^2 = {report.k_squared:.4g} is not below 1/d^2 = {report.bound:.4g} "
                         f"(d = {report.d:.4g})")
        self.report = report


class InverseCrimeError(ValueError):
    """Data were generated on the discretization used for inversion."""


# ---------------------------------------------------------------------------
# Excitations (boundary functions on F)
# ---------------------------------------------------------------------------
def taper(t) -> np.ndarray:
    """``cos(pi t / 2)**4``: one at the membrane pole, vanishing to fourth order at the seam."""
    return np.cos(0.5 * np.pi * np.asarray(t, float)) ** 4


@dataclass(frozen=True)
class ConstantExcitation:
    amplitude: complex = 1.0
    tapered: bool = True

    def values(self, mesh: SurfaceMesh) -> np.ndarray:
        w = taper(mesh.uv[:, 0]) if self.tapered else np.ones(mesh.n_nodes)
        return complex(self.amplitude) * w.astype(complex)

    def to_dict(self) -> dict:
        a = complex(self.amplitude)
        return {"kind": "constant", "amplitude": [a.real, a.imag], "tapered": self.tapered}


@dataclass(frozen=True)
class GaussianBump:
    center: tuple[float, float, float] = (0.0, 0.0, -0.3)
    width: float = 0.15
    amplitude: complex = 1.0
    tapered: bool = True

    def values(self, mesh: SurfaceMesh) -> np.ndarray:
        d2 = np.sum((mesh.nodes - np.asarray(self.center, float)) ** 2, axis=-1)
        w = taper(mesh.uv[:, 0]) if self.tapered else 1.0
        return complex(self.amplitude) * np.exp(-0.5 * d2 / self.width ** 2) * w

    def to_dict(self) -> dict:
        a = complex(self.amplitude)
        return {"kind": "gaussian-bump", "center": list(self.center), "width": self.width,
                "amplitude": [a.real, a.imag], "tapered": self.tapered}


Excitation = Union[ConstantExcitation, GaussianBump]


def _complex(x) -> complex:
    if isinstance(x, (list, tuple)):
        return complex(x[0], x[1])
    return complex(x)


def excitation_from_dict(d: dict) -> Excitation:
    kind = d.get("kind")
    if kind == "constant":
        return ConstantExcitation(_complex(d.get("amplitude", 1.0)), bool(d.get("tapered", True)))
    if kind == "gaussian-bump":
        return GaussianBump(tuple(float(c) for c in d["center"]), float(d["width"]),
                            _complex(d.get("amplitude", 1.0)), bool(d.get("tapered", True)))
    raise ValueError(f"unknown excitation kind {kind!r}")


# ---------------------------------------------------------------------------
# Mesh specification
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class MeshSpec:
    """Cell counts for both patches; ``refine`` splits every cell (nested)."""

    membrane: tuple[int, int] = (2, 8)
    wall: tuple[int, int] = (6, 8)
    order: int = 3
    rule: str = "gauss-legendre-tensor"
    wall_grading: float = 1.4
    refine: int = 1
    membrane_grading: float = 1.0

    def refined(self, factor: int) -> "MeshSpec":
        return replace(self, refine=self.refine * int(factor))

    def _breaks(self, n: int, ratio: float) -> np.ndarray:
        return subdivide_breaks(graded_breaks(n, ratio), self.refine)

    def membrane_mesh(self, geometry: CanalGeometry) -> SurfaceMesh:
        nt, nv = self.membrane
        return build_mesh(geometry.membrane, nt * self.refine, nv * self.refine, self.rule,
                          self.order, self._breaks(nt, self.membrane_grading), self._breaks(nv, 1.0))

    def wall_mesh(self, geometry: CanalGeometry) -> Optional[SurfaceMesh]:
        if geometry.wall is None:
            return None
        nt, nv = self.wall
        return build_mesh(geometry.wall, nt * self.refine, nv * self.refine, self.rule,
                          self.order, self._breaks(nt, self.wall_grading), self._breaks(nv, 1.0))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class ForwardSolution:
    geometry: CanalGeometry
    k: float
    membrane_mesh: SurfaceMesh
    wall_mesh: Optional[SurfaceMesh]
    sigma: np.ndarray
    f_values: np.ndarray
    u_N_on_F: np.ndarray
    u_N_on_G: Optional[np.ndarray]
    residual: float
    condition: float
    convention: JumpConvention = field(repr=False)

    @property
    def meshes(self) -> list[SurfaceMesh]:
        return [m for m in (self.membrane_mesh, self.wall_mesh) if m is not None]

    def _split(self) -> list[np.ndarray]:
        n_f = self.membrane_mesh.n_nodes
        return [self.sigma[:n_f]] + ([self.sigma[n_f:]] if self.wall_mesh is not None else [])

    def evaluate(self, x) -> np.ndarray:
        """Field at points strictly inside (or outside) the boundary."""
        T = TargetSet.free(x)
        return sum(assemble((kn.SINGLE,), self.k, m, T)[kn.SINGLE] @ s
                   for m, s in zip(self.meshes, self._split()))

    def neumann_at(self, patch: str, t, v) -> np.ndarray:
        """Interior normal derivative at parameter points of ``"membrane"`` or ``"wall"``."""
        host = self.membrane_mesh if patch == "membrane" else self.wall_mesh
        if host is None:
            raise ValueError(f"no {patch} patch")
        T = TargetSet.on_surface(host, t, v)
        out = np.zeros(len(T), complex)
        for m, s in zip(self.meshes, self._split()):
            out += assemble((kn.ADJOINT,), self.k, m, T)[kn.ADJOINT] @ s
            if m is host:
                out += 0.5 * self.convention.sigma_jump * m.interpolate(s, T.uv[:, 0], T.uv[:, 1])
        return out


def solve_dirichlet(geometry: CanalGeometry, f_spec, k: float, mesh_spec: MeshSpec = MeshSpec(),
                    check_k: bool = True, tsvd_rtol: float = TSVD_RTOL,
                    cond_max: float = COND_MAX) -> ForwardSolution:
    """Solve ``u = f`` on ``F``, ``u = 0`` on ``G`` with a single layer over ``S``.

    ``f_spec`` is an excitation object (or an array of F-node values).
    """
    if check_k:
        report = check_wavenumber(k, geometry)
        if not report.admissible:
            raise InadmissibleWavenumberError(report)
    conv = jump_convention()
    mf, mg = mesh_spec.membrane_mesh(geometry), mesh_spec.wall_mesh(geometry)
    f = np.asarray(f_spec.values(mf) if hasattr(f_spec, "values") else f_spec, complex)
    if f.shape != (mf.n_nodes,):
        raise ValueError("f values do not match the membrane mesh")
    if not np.any(f != 0):
        raise ValueError("f must not vanish identically")
    meshes = [m for m in (mf, mg) if m is not None]
    targets = [TargetSet.from_mesh(m) for m in meshes]
    S_rows, Dt_rows = [], []
    for T in targets:
        blocks = [assemble((kn.SINGLE, kn.ADJOINT), k, m, T) for m in meshes]
        S_rows.append(np.hstack([b[kn.SINGLE] for b in blocks]))
        Dt_rows.append(np.hstack([b[kn.ADJOINT] for b in blocks]))
    S, Dt = np.vstack(S_rows), np.vstack(Dt_rows)
    rhs = np.concatenate([f] + ([np.zeros(mg.n_nodes, complex)] if mg is not None else []))

    sigma, cond = _first_kind_solve(S, rhs, tsvd_rtol, cond_max)
    res = float(np.linalg.norm(S @ sigma - rhs) / np.linalg.norm(rhs))
    uN = Dt @ sigma + 0.5 * conv.sigma_jump * sigma
    n_f = mf.n_nodes
    log.info("forward solve: %d unknowns, cond %.3e, residual %.2e", len(sigma), cond, res)
    return ForwardSolution(geometry, float(k), mf, mg, sigma, f, uN[:n_f],
                           uN[n_f:] if mg is not None else None, res, cond, conv)


def _first_kind_solve(S: np.ndarray, rhs: np.ndarray, tsvd_rtol: float, cond_max: float):
    """LU solve guarded by a 1-norm condition estimate.

    Systems whose estimate exceeds ``1 / tsvd_rtol`` are solved by
    truncated SVD instead; estimates above ``cond_max`` are refused.
    """
    lu, piv = sla.lu_factor(S, check_finite=False)
    rcond, info = sla.lapack.get_lapack_funcs("gecon", (lu,))(lu, np.linalg.norm(S, 1), norm="1")
    cond = 1.0 / rcond if rcond > 0 else np.inf
    if cond > cond_max:
        raise NearResonanceError(f"condition estimate {cond:.3e} exceeds {cond_max:.1e}; "
                                 "k may be close to an interior eigenvalue or the mesh too coarse")
    if cond * tsvd_rtol < 1.0:
        return sla.lu_solve((lu, piv), rhs, check_finite=False), float(cond)
    U, sv, Vh = np.linalg.svd(S)
    keep = sv > tsvd_rtol * sv[0]
    log.info("truncated SVD keeps %d of %d singular values", int(keep.sum()), len(sv))
    return Vh[keep].conj().T @ ((U[:, keep].conj().T @ rhs) / sv[keep]), float(cond)


def _rel_l2(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    return float(np.sqrt(np.sum(w * np.abs(a - b) ** 2) / np.sum(w * np.abs(b) ** 2)))


def geometry_hash(geometry: CanalGeometry) -> str:
    payload = json.dumps(geometry.to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def make_synthetic(geometry: CanalGeometry, f_spec, k: float, mesh_spec: MeshSpec = MeshSpec(),
                   fine_factor: int = 2, noise_level: float = 0.0, seed: Optional[int] = None,
                   allow_inverse_crime: bool = False, estimate_error: bool = True,
                   check_k: bool = True) -> CauchyDatum:
    """Cauchy data on the inversion membrane mesh from a refined forward solve.

    ``h`` on the coarse nodes comes from evaluating the fine solution's
    normal derivative at their parameter points. With ``estimate_error`` a
    second solve on the coarse meshes gives the discretization-error
    estimate ``|h_coarse - h_fine| / |h_fine|`` stored in the provenance.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    if fine_factor < 2 and not allow_inverse_crime:
        raise InverseCrimeError("fine_factor must be >= 2 (inverse-crime guard)")
    fine_spec = mesh_spec.refined(fine_factor)
    sol = solve_dirichlet(geometry, f_spec, k, fine_spec, check_k=check_k)
    coarse_f = mesh_spec.membrane_mesh(geometry)
    f = np.asarray(f_spec.values(coarse_f), complex)
    if fine_factor == 1:
        h = sol.u_N_on_F.copy()
    else:
        h = sol.neumann_at("membrane", coarse_f.uv[:, 0], coarse_f.uv[:, 1])
    prov = {
        "k": float(k),
        "fine_factor": int(fine_factor),
        "mesh_spec": mesh_spec.to_dict(),
        "generation_hashes": [m.fingerprint for m in sol.meshes],
        "inversion_membrane_hash": coarse_f.fingerprint,
        "truth_geometry_hash": geometry_hash(geometry),
        "excitation": f_spec.to_dict() if hasattr(f_spec, "to_dict") else "array",
        "forward_residual": sol.residual,
        "condition": sol.condition,
        "noise_level": float(noise_level),
        "seed": seed,
    }
    if estimate_error and fine_factor > 1:
        coarse = solve_dirichlet(geometry, f_spec, k, mesh_spec, check_k=False)
        prov["disc_error_estimate"] = _rel_l2(coarse.u_N_on_F, h, coarse_f.weights)
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        rms = math.sqrt(float(np.sum(coarse_f.weights * np.abs(h) ** 2) / coarse_f.total_area))
        noise = rng.standard_normal(len(h)) + 1j * rng.standard_normal(len(h))
        h = h + noise_level * rms * noise / math.sqrt(2.0)
    return CauchyDatum(float(k), f, h, coarse_f, prov)
