"""The known potential U, the single-layer potential V and the operator A.

With ``S = F + G`` the closed boundary of the canal, outward normal ``N``
and Cauchy data ``f = u``, ``h = u_N`` on ``F``, Green's formula gives
inside the canal::

    u = U + V,   U(x) = int_F [g h - g_N f] ds,   V(x) = int_G g H ds,

with the unknown density ``H = u_N`` on ``G``. ``A H = 2 int_G g_N(s, s') H(s') ds'``
differentiates in the target point ``s``.

Trace conventions are not assumed: ``calibrate`` measures the jump sign of
the single-layer normal derivative and of the double-layer potential on
the unit sphere and all trace formulas use the result.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels as kn
from .geometry.canal import sphere_geometry
from .geometry.mesh import SurfaceMesh, build_mesh
from .operators import TargetSet, assemble

log = logging.getLogger(__name__)


class DataMismatchError(ValueError):
    """A datum does not belong to the mesh (or wavenumber) it is used with."""


@dataclass(frozen=True, eq=False)
class CauchyDatum:
    """Samples of ``f`` (pressure) and ``h`` (normal velocity) at F-mesh nodes."""

    k: float
    f_values: np.ndarray
    h_values: np.ndarray
    mesh: SurfaceMesh
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.f_values, complex)
        h = np.asarray(self.h_values, complex)
        if f.shape != (self.mesh.n_nodes,) or h.shape != (self.mesh.n_nodes,):
            raise DataMismatchError(
                f"datum has {f.shape[0]}/{h.shape[0]} samples, mesh has {self.mesh.n_nodes} nodes")
        if not np.any(f != 0):
            raise ValueError("f must not vanish identically")
        object.__setattr__(self, "f_values", f)
        object.__setattr__(self, "h_values", h)

    @property
    def mesh_hash(self) -> str:
        return self.mesh.fingerprint

    def scaled(self, c: complex) -> "CauchyDatum":
        return CauchyDatum(self.k, c * self.f_values, c * self.h_values, self.mesh, dict(self.provenance))

    def with_h(self, h_values) -> "CauchyDatum":
        return CauchyDatum(self.k, self.f_values, h_values, self.mesh, dict(self.provenance))


@dataclass(frozen=True, eq=False)
class Density:
    """Samples of the single-layer density ``H`` at G-mesh nodes."""

    values: np.ndarray
    mesh: SurfaceMesh

    def __post_init__(self):
        v = np.asarray(self.values, complex)
        if v.shape != (self.mesh.n_nodes,):
            raise DataMismatchError(f"density has {v.shape} samples, mesh has {self.mesh.n_nodes} nodes")
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# Jump conventions
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class JumpConvention:
    """Measured interior trace relations.

    * interior normal derivative of ``V``: ``A H / 2 + sigma_jump * H / 2``
    * interior trace of the double layer ``W f = int g_N f``:
      ``K f + double_sign * f / 2`` with ``K`` the direct value.

    The density equation obtained from ``u_N = U_N + V_N`` on ``G`` is
    ``H = u_coeff * U_N + a_coeff * A H``.
    """

    sigma_jump: int
    double_sign: int
    evidence: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def u_coeff(self) -> float:
        return 1.0 / (1.0 - 0.5 * self.sigma_jump)

    @property
    def a_coeff(self) -> float:
        return 0.5 / (1.0 - 0.5 * self.sigma_jump)

    @property
    def relation(self) -> str:
        return f"H = {self.u_coeff:g} U_N + {self.a_coeff:g} A H"


@lru_cache(maxsize=None)
def calibrate(res_t: int = 4, res_v: int = 8, order: int = 3) -> JumpConvention:
    """Fix the jump signs on the unit sphere with Laplace kernels.

    For a constant single-layer density the interior field is constant
    (shell theorem), so the interior normal trace vanishes; for the
    double layer with unit density the interior value is obtained by
    direct quadrature at the center.
    """
    mesh = build_mesh(sphere_geometry(1.0).membrane, res_t, res_v, order=order)
    on = TargetSet.from_mesh(mesh)
    M = assemble((kn.ADJOINT, kn.DOUBLE), 0.0, mesh, on)
    one = np.ones(mesh.n_nodes)
    half_A = (M[kn.ADJOINT] @ one).real           # K' 1
    cand = {s: float(np.abs(half_A + 0.5 * s).max()) for s in (1, -1)}
    sigma = min(cand, key=cand.get)

    inside = assemble((kn.DOUBLE,), 0.0, mesh, TargetSet.free([[0.0, 0.0, 0.0]]))[kn.DOUBLE]
    w_inside = float((inside @ one).real[0])
    direct = (M[kn.DOUBLE] @ one).real
    cand_d = {s: float(np.abs(direct + 0.5 * s - w_inside).max()) for s in (1, -1)}
    dsign = min(cand_d, key=cand_d.get)
    conv = JumpConvention(sigma, dsign, {
        "single_layer_trace_error": cand, "double_layer_trace_error": cand_d,
        "double_layer_interior_value": w_inside, "mesh_nodes": mesh.n_nodes,
    })
    log.info("calibrated jump convention: sigma_jump=%+d, double_sign=%+d, %s",
             sigma, dsign, conv.relation)
    return conv


def jump_convention() -> JumpConvention:
    return calibrate()


# ---------------------------------------------------------------------------
# Field evaluation
# ---------------------------------------------------------------------------
def _free_targets(mesh: SurfaceMesh, x, near_ok: bool) -> TargetSet:
    x = np.atleast_2d(np.asarray(x, float))
    d = np.linalg.norm(x[:, None, :] - mesh.nodes[None, :, :], axis=-1).min(axis=1)
    if not near_ok and np.any(d < 1e-10 * mesh.patch.diameter):
        raise ValueError("evaluation point coincides with a mesh node; use the surface traces")
    return TargetSet.free(x)


def eval_U(datum: CauchyDatum, x, near_ok: bool = False) -> np.ndarray:
    """``U(x) = int_F [g h - g_N f] ds`` at points off ``F``."""
    T = _free_targets(datum.mesh, x, near_ok)
    M = assemble((kn.SINGLE, kn.DOUBLE), datum.k, datum.mesh, T)
    return M[kn.SINGLE] @ datum.h_values - M[kn.DOUBLE] @ datum.f_values


def _targets_maybe_on(mesh: SurfaceMesh, x) -> TargetSet:
    """Targets hosted by ``mesh`` when every point is one of its nodes."""
    x = np.atleast_2d(np.asarray(x, float))
    d = np.linalg.norm(x[:, None, :] - mesh.nodes[None, :, :], axis=-1)
    j = d.argmin(axis=1)
    if np.all(d[np.arange(len(x)), j] < 1e-10 * mesh.patch.diameter):
        return TargetSet(mesh.nodes[j], mesh.normals[j], mesh, mesh.cell_of_node[j],
                         mesh.local_uv[j], mesh.uv[j])
    return TargetSet.free(x)


def eval_V(density: Density, x, k: float) -> np.ndarray:
    """Single-layer potential ``int_G g H ds``; G nodes use the singular rule."""
    T = _targets_maybe_on(density.mesh, x)
    return assemble((kn.SINGLE,), k, density.mesh, T)[kn.SINGLE] @ density.values


def apply_A(density: Density, k: float) -> np.ndarray:
    """``A H = 2 int_G g_N(s, s') H(s') ds'`` at the G nodes."""
    M = assemble((kn.ADJOINT,), k, density.mesh, TargetSet.from_mesh(density.mesh))
    return 2.0 * (M[kn.ADJOINT] @ density.values)


def neumann_trace_V(density: Density, k: float,
                    convention: Optional[JumpConvention] = None) -> np.ndarray:
    """Interior normal derivative of ``V`` on ``G``: ``A H / 2 + sigma H / 2``."""
    conv = convention or jump_convention()
    return 0.5 * apply_A(density, k) + 0.5 * conv.sigma_jump * density.values


def U_on_surface(datum: CauchyDatum, targets: TargetSet) -> tuple[np.ndarray, np.ndarray]:
    """``U`` and ``dU/dN_x`` at targets away from ``F`` (e.g. the G nodes)."""
    M = assemble((kn.SINGLE, kn.DOUBLE, kn.ADJOINT, kn.NORMAL_NORMAL), datum.k, datum.mesh, targets)
    f, h = datum.f_values, datum.h_values
    return (M[kn.SINGLE] @ h - M[kn.DOUBLE] @ f,
            M[kn.ADJOINT] @ h - M[kn.NORMAL_NORMAL] @ f)


EXTRAPOLATION_WEIGHTS = np.array([4.0, -6.0, 4.0, -1.0])


@lru_cache(maxsize=8)
def _double_layer_normal_trace(mesh: SurfaceMesh, k: float, frac: float) -> np.ndarray:
    _, radii = mesh.cell_centers_radii
    delta = frac * radii[mesh.cell_of_node]
    n = mesh.n_nodes
    pts = np.concatenate([mesh.nodes - (j + 1) * delta[:, None] * mesh.normals for j in range(4)])
    T = TargetSet.free(pts, np.tile(mesh.normals, (4, 1)))
    M = assemble((kn.NORMAL_NORMAL,), k, mesh, T)[kn.NORMAL_NORMAL]
    out = sum(w * M[j * n:(j + 1) * n] for j, w in enumerate(EXTRAPOLATION_WEIGHTS))
    out.setflags(write=False)
    return out


def double_layer_normal_trace(mesh: SurfaceMesh, k: float, frac: float = 0.15) -> np.ndarray:
    """Matrix of ``f -> dW f / dN`` on the surface, ``W f = int g_N f ds``.

    The normal derivative of a double layer is continuous across the
    surface but its direct quadrature is hypersingular. It is evaluated
    instead at four interior points ``x - j delta N`` (``delta = frac`` times
    the cell radius) and extrapolated to ``x`` with the cubic weights
    ``[4, -6, 4, -1]``.
    """
    return _double_layer_normal_trace(mesh, float(k), float(frac))


def U_traces_on_F(datum: CauchyDatum, convention: Optional[JumpConvention] = None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Interior Dirichlet and Neumann traces of ``U`` on ``F`` itself."""
    conv = convention or jump_convention()
    mesh, f, h = datum.mesh, datum.f_values, datum.h_values
    M = assemble((kn.SINGLE, kn.DOUBLE, kn.ADJOINT), datum.k, mesh, TargetSet.from_mesh(mesh))
    dirichlet = M[kn.SINGLE] @ h - (M[kn.DOUBLE] @ f + 0.5 * conv.double_sign * f)
    neumann = (M[kn.ADJOINT] @ h + 0.5 * conv.sigma_jump * h
               - double_layer_normal_trace(mesh, datum.k) @ f)
    return dirichlet, neumann


def jump_equation_residual(density: Density, datum: CauchyDatum,
                           convention: Optional[JumpConvention] = None) -> np.ndarray:
    """``R4 = H - (u_coeff U_N + a_coeff A H)`` at the G nodes."""
    conv = convention or jump_convention()
    _, U_N = U_on_surface(datum, TargetSet.from_mesh(density.mesh))
    return density.values - conv.u_coeff * U_N - conv.a_coeff * apply_A(density, datum.k)


# ---------------------------------------------------------------------------
# Datum files
# ---------------------------------------------------------------------------
COLUMNS = ("node_index", "t", "v", "re_f", "im_f", "re_h", "im_h")


def datum_header(datum: CauchyDatum, extra: Optional[dict] = None) -> dict:
    head = {"k": repr(float(datum.k)), "mesh_hash": datum.mesh_hash,
            "n_nodes": str(datum.mesh.n_nodes),
            "provenance": json.dumps(datum.provenance, sort_keys=True)}
    if extra:
        head.update({key: str(val) for key, val in extra.items()})
    return head


def datum_to_csv(datum: CauchyDatum, extra: Optional[dict] = None) -> str:
    buf = io.StringIO()
    for key, val in datum_header(datum, extra).items():
        buf.write(f"# {key}: {val}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for i, ((t, v), f, h) in enumerate(zip(datum.mesh.uv, datum.f_values, datum.h_values)):
        w.writerow([i, repr(float(t)), repr(float(v)), repr(float(f.real)), repr(float(f.imag)),
                    repr(float(h.real)), repr(float(h.imag))])
    return buf.getvalue()


def write_datum(datum: CauchyDatum, path, extra: Optional[dict] = None) -> Path:
    """Write a datum as CSV (``.csv``) or JSON (any other suffix)."""
    path = Path(path)
    if path.suffix == ".csv":
        path.write_text(datum_to_csv(datum, extra))
    else:
        doc = {"header": datum_header(datum, extra),
               "columns": list(COLUMNS),
               "rows": [[i, float(t), float(v), float(f.real), float(f.imag), float(h.real), float(h.imag)]
                        for i, ((t, v), f, h) in enumerate(zip(datum.mesh.uv, datum.f_values,
                                                              datum.h_values))]}
        path.write_text(json.dumps(doc, indent=0))
    return path


def read_datum(path, mesh: SurfaceMesh) -> CauchyDatum:
    """Read a datum file, refusing it when its mesh hash differs from ``mesh``."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".csv":
        header, body = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                header[key.strip()] = val.strip()
            elif line.strip():
                body.append(line)
        rows = list(csv.reader(body))
        if tuple(rows[0]) != COLUMNS:
            raise ValueError(f"{path}: unexpected columns {rows[0]}")
        table = np.array(rows[1:], float)
    else:
        doc = json.loads(text)
        header, table = doc["header"], np.array(doc["rows"], float)
    if header.get("mesh_hash") != mesh.fingerprint:
        raise DataMismatchError(
            f"{path}: data mesh hash {header.get('mesh_hash')} != inversion F mesh {mesh.fingerprint}")
    if len(table) != mesh.n_nodes or np.any(table[:, 0] != np.arange(mesh.n_nodes)):
        raise DataMismatchError(f"{path}: node indices do not match the mesh")
    f = table[:, 3] + 1j * table[:, 4]
    h = table[:, 5] + 1j * table[:, 6]
    prov = json.loads(header.get("provenance", "{}"))
    return CauchyDatum(float(header["k"]), f, h, mesh, prov)


def stack_data(data: Sequence[CauchyDatum]) -> tuple[float, SurfaceMesh]:
    """Common wavenumber and F mesh of several data; raises on mismatch."""
    if not data:
        raise ValueError("at least one datum is required")
    k, mesh = data[0].k, data[0].mesh
    for d in data[1:]:
        if d.k != k:
            raise DataMismatchError(f"data wavenumbers differ ({k} vs {d.k})")
        if d.mesh_hash != mesh.fingerprint:
            raise DataMismatchError("data live on different F meshes")
    return k, mesh
