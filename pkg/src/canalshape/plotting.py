"""Report figures rendered to PNG files with the non-interactive backend."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry.patches import RadialGraphPatch  # noqa: E402
from .potentials import CauchyDatum  # noqa: E402


def _save(fig, path, config_hash: str) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None, "Description": f"config_hash {config_hash}"})
    plt.close(fig)
    return path


def plot_history(history: Sequence[dict], path, config_hash: str = "") -> Path:
    """Stacked and per-block residual norms against iteration."""
    it = [h["iteration"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(it, [h["total"] for h in history], "k-o", label="total")
    for key in ("R1", "R2", "R3", "R4"):
        ax.semilogy(it, [max(h[key], 1e-300) for h in history], "--", label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("residual norm")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path, config_hash)


def _offset_map(wall: RadialGraphPatch, res=(64, 48)):
    t = np.linspace(0.0, 1.0, res[0])
    v = np.linspace(0.0, 1.0, res[1], endpoint=False)
    tt, vv = np.meshgrid(t, v, indexing="ij")
    z = wall.reference.points(tt, vv)[..., 2] - wall.reference.origin[2]
    return z, 2 * np.pi * vv, wall.offset(tt, vv)


def plot_wall_offsets(wall: RadialGraphPatch, path, radius: float,
                      truth: Optional[RadialGraphPatch] = None, config_hash: str = "") -> Path:
    """Radial offset of the wall (percent of the radius) over axial position and angle."""
    panels = [("reconstructed", wall)] + ([("truth", truth)] if truth is not None else [])
    maps = [_offset_map(w) for _, w in panels]
    vmax = max(float(np.max(np.abs(m[2]))) for m in maps) / radius * 100 or 1.0
    fig, axes = plt.subplots(1, len(panels), figsize=(5 * len(panels), 4), squeeze=False)
    for ax, (title, _), (z, phi, off) in zip(axes[0], panels, maps):
        im = ax.pcolormesh(z, phi, off / radius * 100, shading="auto", cmap="RdBu_r",
                           vmin=-vmax, vmax=vmax)
        ax.set_title(title)
        ax.set_xlabel("z")
        ax.set_ylabel("angle")
        fig.colorbar(im, ax=ax, label="offset / radius [%]")
    fig.tight_layout()
    return _save(fig, path, config_hash)


def plot_trace(datum: CauchyDatum, path, config_hash: str = "") -> Path:
    """Magnitude of ``f`` and ``h`` over the membrane parameter square."""
    uv = datum.mesh.uv
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, vals, name in zip(axes, (datum.f_values, datum.h_values), ("|f|", "|h|")):
        sc = ax.scatter(uv[:, 1], uv[:, 0], c=np.abs(vals), s=12, cmap="viridis")
        ax.set_xlabel("v")
        ax.set_ylabel("t")
        ax.set_title(name)
        fig.colorbar(sc, ax=ax)
    fig.tight_layout()
    return _save(fig, path, config_hash)
