"""Helmholtz free-space kernels and quadrature for their singularities.

Sign convention for normal derivatives (used everywhere in the package):

* ``green_normal(x, s, n)`` is the derivative of ``g(x, s)`` with respect to
  the *second* argument ``s`` along ``n``; with ``n`` the outward normal at a
  source point this is the double-layer kernel ``dg/dN_s``.
* the adjoint kernel ``dg/dN_x`` differentiates in the first argument.

All kernels are ``g(r) = exp(i k r) / (4 pi r)`` and its derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

FOUR_PI = 4.0 * math.pi

# kernel kinds understood by ``kernel_values``
SINGLE = "S"          # g(x, y)
DOUBLE = "D"          # dg/dN_y
ADJOINT = "Dt"        # dg/dN_x
NORMAL_NORMAL = "N"   # d2g/dN_x dN_y, only for separated points
GRAD_SINGLE = "gS"    # grad_x g, vector valued
GRAD_DOUBLE = "gD"    # grad_x dg/dN_y, vector valued


class SingularPointError(ValueError):
    """A kernel was evaluated with coincident target and source."""


@dataclass(frozen=True)
class Kernel:
    k: float = 0.0

    def __post_init__(self):
        if not self.k >= 0:
            raise ValueError(f"wavenumber must be >= 0, got {self.k}")


def _radial(k: float, r: np.ndarray):
    """``g, g', g''`` as functions of the distance."""
    e = np.exp(1j * k * r) / FOUR_PI
    ikr = 1j * k * r
    g = e / r
    g1 = e * (ikr - 1.0) / r ** 2
    g2 = e * (2.0 - 2.0 * ikr - (k * r) ** 2) / r ** 3
    return g, g1, g2


def _check(r: np.ndarray, scale: float = 1.0):
    if np.any(r < 1e-14 * scale):
        raise SingularPointError("target coincides with source; use singular quadrature")


def green(kernel: Kernel, x, s) -> np.ndarray:
    """``exp(i k r) / (4 pi r)`` with ``r = |x - s|``."""
    d = np.asarray(x, float) - np.asarray(s, float)
    r = np.linalg.norm(d, axis=-1)
    _check(r)
    return np.exp(1j * kernel.k * r) / (FOUR_PI * r)


def green_normal(kernel: Kernel, x, s, n) -> np.ndarray:
    """Derivative of ``g(x, s)`` in ``s`` along the unit vector ``n``."""
    d = np.asarray(x, float) - np.asarray(s, float)
    r = np.linalg.norm(d, axis=-1)
    _check(r)
    _, g1, _ = _radial(kernel.k, r)
    return g1 * np.einsum("...i,...i->...", -d, np.asarray(n, float)) / r


def kernel_values(kinds, k: float, x, nx, y, ny) -> dict:
    """Evaluate several kernels on broadcast target/source arrays.

    ``x, nx`` are target points/normals and ``y, ny`` source points/normals
    (``nx`` may be ``None`` when no target-normal kernel is requested).
    Returns ``{kind: values}``; the gradient kinds carry a trailing axis of
    length 3.
    """
    d = x - y
    r = np.sqrt(np.einsum("...i,...i->...", d, d))
    g, g1, g2 = _radial(k, r)
    out = {}
    dny = dnx = None
    if any(kd in kinds for kd in (DOUBLE, NORMAL_NORMAL, GRAD_DOUBLE)):
        dny = np.einsum("...i,...i->...", d, ny) / r
    if any(kd in kinds for kd in (ADJOINT, NORMAL_NORMAL)):
        dnx = np.einsum("...i,...i->...", d, nx) / r
    for kind in kinds:
        if kind == SINGLE:
            out[kind] = g
        elif kind == DOUBLE:
            out[kind] = -g1 * dny
        elif kind == ADJOINT:
            out[kind] = g1 * dnx
        elif kind == NORMAL_NORMAL:
            nn = np.einsum("...i,...i->...", nx, ny)
            out[kind] = -(g2 * dnx * dny + g1 * (nn - dnx * dny) / r)
        elif kind == GRAD_SINGLE:
            out[kind] = (g1 / r)[..., None] * d
        elif kind == GRAD_DOUBLE:
            u = d / r[..., None]
            out[kind] = -((g2 * dny)[..., None] * u + (g1 / r)[..., None] * (ny - dny[..., None] * u))
        else:
            raise ValueError(f"unknown kernel kind {kind!r}")
    return out


# ---------------------------------------------------------------------------
# Quadrature rules on the unit cell
# ---------------------------------------------------------------------------
def gauss01(m: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (x + 1.0), 0.5 * w


_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
_EDGE_NORMALS = np.array([[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])


def duffy_rule(apex: np.ndarray, order: int, scale=None) -> tuple[np.ndarray, np.ndarray]:
    """Singular rule on the unit square for a singularity at ``apex``.

    The square is split into four triangles sharing the apex, each further
    halved at the foot of the perpendicular from the apex. On every piece
    the radial variable ``s`` runs from the apex to the edge and the edge
    coordinate measured from the foot is ``x = h sinh(xi)`` (``h`` is the
    apex-edge distance). The Jacobian ``s h^2 cosh(xi)`` cancels a ``1/r``
    singularity exactly and removes the near-singular ``1/sqrt(h^2 + x^2)``
    profile along the edge, so the rule stays accurate for apexes close to
    an edge or corner.

    ``scale`` (shape ``(n, 2)``) gives the physical side lengths of the
    cell at the apex; the construction is then carried out in the
    stretched rectangle so that distances follow the surface metric of
    thin (e.g. polar) cells.

    ``apex`` has shape ``(n, 2)`` inside the closed square; pieces that
    degenerate because the apex lies on their edge get zero weight. Returns
    points ``(n, 8 * order**2, 2)`` and weights ``(n, 8 * order**2)``.
    """
    apex = np.atleast_2d(np.asarray(apex, float))
    if scale is None:
        sc = np.ones_like(apex)
    else:
        sc = np.atleast_2d(np.asarray(scale, float))
        sc = sc / sc.max(axis=1, keepdims=True)
    ap = apex * sc
    xs, ws = gauss01(order)
    out_p, out_w = [], []
    for e in range(4):
        nrm = _EDGE_NORMALS[e]
        c0 = _CORNERS[e][None, :] * sc
        c1 = _CORNERS[(e + 1) % 4][None, :] * sc
        tau = _CORNERS[(e + 1) % 4] - _CORNERS[e]
        h = np.einsum("ni,i->n", c0 - ap, nrm)
        foot = ap + h[:, None] * nrm[None, :]
        x_ends = (np.einsum("ni,i->n", c0 - foot, tau), np.einsum("ni,i->n", c1 - foot, tau))
        flat = h <= 1e-14
        h = np.where(flat, 1.0, h)
        for x_end in x_ends:
            sgn = np.sign(x_end)
            # an apex on this edge leaves a piece of zero area
            xi_max = np.where(flat, 0.0, np.arcsinh(np.abs(x_end) / h))
            xi = xi_max[:, None] * xs[None, :]
            x = sgn[:, None] * h[:, None] * np.sinh(xi)
            ray = h[:, None, None] * nrm[None, None, :] + x[:, :, None] * tau[None, None, :]
            pts = ap[:, None, None, :] + xs[None, None, :, None] * ray[:, :, None, :]
            w = ((xi_max[:, None] * ws[None, :] * h[:, None] ** 2 * np.cosh(xi))[:, :, None]
                 * (ws * xs)[None, None, :])
            out_p.append((pts / sc[:, None, None, :]).reshape(len(apex), -1, 2))
            out_w.append((w / np.prod(sc, axis=1)[:, None, None]).reshape(len(apex), -1))
    return np.concatenate(out_p, axis=1), np.concatenate(out_w, axis=1)


def near_boxes(mesh, targets: np.ndarray, cells: np.ndarray, eta: float = 2.5,
               max_level: int = 14):
    """Adaptive quadtree subdivision of whole cells for nearby targets.

    A dyadic box is accepted once the target is at least ``eta`` bounding
    radii from its center; otherwise it is split in four. ``targets[i]``
    pairs with ``cells[i]``. Returns ``(pair_index, box_key, lo, size)``
    over accepted boxes, where ``box_key`` identifies the (cell, box)
    combination so geometry can be shared between targets.
    """
    probe = np.array([[0.5, 0.5], [0, 0], [1, 0], [1, 1], [0, 1],
                      [0.5, 0], [1, 0.5], [0.5, 1], [0, 0.5]])
    quads = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    pid = np.arange(len(cells))
    lo = np.zeros((len(cells), 2))
    size = np.ones(len(cells))
    out = ([], [], [], [])
    for level in range(max_level + 1):
        if len(pid) == 0:
            break
        ij = np.rint(lo * 2 ** level).astype(np.int64)
        key = ((cells[pid].astype(np.int64) * 16 + level) << 30) + (ij[:, 0] << 15) + ij[:, 1]
        _, first, inv = np.unique(key, return_index=True, return_inverse=True)
        loc = lo[first][:, None, :] + size[first][:, None, None] * probe[None, :, :]
        pts = mesh.cell_points(cells[pid[first]][:, None], loc)
        center = pts[:, 0]
        radius = np.linalg.norm(pts - center[:, None, :], axis=-1).max(axis=1)
        dist = np.linalg.norm(targets[pid] - center[inv], axis=-1)
        ok = (dist >= eta * radius[inv]) | (level == max_level)
        if np.any(ok):
            for lst, val in zip(out, (pid[ok], key[ok], lo[ok], size[ok])):
                lst.append(val)
        bad = ~ok
        pid, lo, size = pid[bad], lo[bad], size[bad] / 2
        lo = (lo[:, None, :] + size[:, None, None] * quads[None]).reshape(-1, 2)
        pid = np.repeat(pid, 4)
        size = np.repeat(size, 4)
    if not out[0]:
        return np.zeros(0, int), np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0)
    return tuple(np.concatenate(lst) for lst in out)


def near_rule(mesh, targets: np.ndarray, cells: np.ndarray, order: int = 6,
              eta: float = 2.5, max_level: int = 14):
    """Flattened quadrature from ``near_boxes`` with an ``order x order`` Gauss rule.

    Returns ``(pair_index, local_points, weights)``; weights are in
    unit-cell measure.
    """
    pid, _, lo, size = near_boxes(mesh, targets, cells, eta, max_level)
    gpts, gw = gauss_square(order)
    pts = (lo[:, None, :] + size[:, None, None] * gpts[None]).reshape(-1, 2)
    w = (size[:, None] ** 2 * gw[None, :]).ravel()
    return np.repeat(pid, len(gw)), pts, w


def gauss_square(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre rule on the unit square."""
    xg, wg = gauss01(order)
    ga, gb = np.meshgrid(xg, xg, indexing="ij")
    return np.stack([ga.ravel(), gb.ravel()], axis=-1), np.outer(wg, wg).ravel()


def singular_panel_quad(kernel_eval: Callable, mesh, cell: int, local, order: int = 10) -> np.ndarray:
    """Integrals of ``kernel * basis_j`` over one cell containing the target.

    ``kernel_eval(points, normals)`` evaluates the kernel at source points
    for the fixed target; ``local`` gives the target's unit-cell
    coordinates. Returns one value per cell basis function; their sum is
    the integral of the kernel itself.
    """
    local = np.asarray(local, float)
    pts, w = duffy_rule(local[None, :], order, mesh.cell_scales(np.array([cell]), local[None, :]))
    pts, w = pts[0], w[0]
    y, ny, jac = mesh.cell_geometry(np.full(len(w), cell), pts)
    vals = kernel_eval(y, ny) * w * jac
    return vals @ mesh.basis(pts)
