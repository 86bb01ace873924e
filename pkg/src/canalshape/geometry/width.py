"""Minimal width of a closed surface and the wavenumber admissibility test.

The width ``d`` in a direction ``alpha`` is the distance between the two
supporting planes perpendicular to ``alpha``; ``1/d**2`` bounds the lowest
Dirichlet eigenvalue from below, so ``k**2 < 1/d**2`` guarantees that
``k**2`` is below the spectrum.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc


@dataclass(frozen=True)
class AdmissibilityReport:
    d: float
    bound: float
    k_squared: float
    admissible: bool
    margin: float
    direction: tuple[float, float, float]
    sufficient_only: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def hemisphere_directions(n: int) -> np.ndarray:
    """Nested quasi-uniform unit vectors on the upper hemisphere.

    Prefixes of the sequence are reused as ``n`` grows, so adding
    directions never loses a sample.
    """
    u = qmc.Halton(d=2, scramble=False).random(n + 1)[1:]
    z = u[:, 0]
    phi = 2 * np.pi * u[:, 1]
    s = np.sqrt(1 - z * z)
    return np.column_stack([s * np.cos(phi), s * np.sin(phi), z])


def _surface_samples(geometry, n_samples: int) -> np.ndarray:
    return np.concatenate([p.sample_grid(n_samples, 2 * n_samples).reshape(-1, 3)
                           for p in geometry.patches])


def _width(points: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    proj = points @ alpha.T
    return proj.max(axis=0) - proj.min(axis=0)


def _refine(points: np.ndarray, alpha0: np.ndarray) -> tuple[float, np.ndarray]:
    e1 = np.cross(alpha0, [1.0, 0.0, 0.0])
    if np.linalg.norm(e1) < 0.5:
        e1 = np.cross(alpha0, [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(alpha0, e1)

    def direction(ab):
        a = alpha0 + ab[0] * e1 + ab[1] * e2
        return a / np.linalg.norm(a)

    def fun(ab):
        return float(_width(points, direction(ab)[None, :])[0])

    res = minimize(fun, np.zeros(2), method="Nelder-Mead",
                   options={"xatol": 1e-7, "fatol": 1e-12, "initial_simplex":
                            np.array([[0.0, 0.0], [0.15, 0.0], [0.0, 0.15]])})
    return float(res.fun), direction(res.x)


def min_width(geometry, n_directions: int = 256, n_samples: int = 65) -> tuple[float, np.ndarray]:
    """Minimal width over sampled directions and the minimizing direction.

    Every running-best sampled direction seeds a local Nelder-Mead search;
    the reported width is the smallest value seen. Because the direction
    sequence is nested, the result never increases with ``n_directions``.
    """
    if n_directions < 16:
        raise ValueError("n_directions must be >= 16")
    pts = _surface_samples(geometry, n_samples)
    pts = pts - pts.mean(axis=0)
    dirs = hemisphere_directions(n_directions)
    widths = _width(pts, dirs)
    running = np.minimum.accumulate(widths)
    seeds = np.flatnonzero(np.r_[True, running[1:] < running[:-1]])
    best_d, best_a = float(widths[seeds[-1]]), dirs[seeds[-1]]
    for i in seeds:
        d, a = _refine(pts, dirs[i])
        if d < best_d:
            best_d, best_a = d, a
    return best_d, best_a


def check_wavenumber(k: float, geometry, n_directions: int = 256) -> AdmissibilityReport:
    """Sufficient test ``k**2 < 1/d**2`` for ``k**2`` below the Dirichlet spectrum."""
    if not k > 0:
        raise ValueError(f"wavenumber must be positive, got {k}")
    d, alpha = min_width(geometry, n_directions)
    bound = 1.0 / d ** 2
    k2 = float(k) ** 2
    return AdmissibilityReport(d=d, bound=bound, k_squared=k2, admissible=bool(k2 < bound),
                               margin=bound - k2, direction=tuple(float(x) for x in alpha))
