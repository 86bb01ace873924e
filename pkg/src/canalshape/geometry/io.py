"""Surface export (Wavefront OBJ, legacy ASCII VTK) and JSON geometry files."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .canal import CanalGeometry


def _quad_grid(grid: np.ndarray, offset: int) -> tuple[np.ndarray, list[tuple[int, int, int, int]]]:
    n_t, n_v = grid.shape[:2]
    verts = grid.reshape(-1, 3)
    faces = []
    for i in range(n_t - 1):
        for j in range(n_v - 1):
            a = offset + i * n_v + j
            faces.append((a, a + 1, a + n_v + 1, a + n_v))
    return verts, faces


def surface_quads(geometry: CanalGeometry, grids: Optional[Iterable[np.ndarray]] = None):
    """Vertices and quad faces from every patch's control grid."""
    grids = [p.control_points() for p in geometry.patches] if grids is None else list(grids)
    verts, faces, offset = [], [], 0
    for g in grids:
        v, f = _quad_grid(np.asarray(g), offset)
        verts.append(v)
        faces.extend(f)
        offset += len(v)
    return np.concatenate(verts), faces


def export_obj(geometry: CanalGeometry, path, comment: str = "") -> Path:
    verts, faces = surface_quads(geometry)
    path = Path(path)
    lines = [f"# {c}" for c in comment.splitlines()] if comment else []
    lines += [f"v {x:.12g} {y:.12g} {z:.12g}" for x, y, z in verts]
    lines += ["f " + " ".join(str(i + 1) for i in f) for f in faces]
    path.write_text("\n".join(lines) + "\n")
    return path


def export_vtk(geometry: CanalGeometry, path, title: str = "canal surface",
               point_data: Optional[dict] = None) -> Path:
    """Legacy ASCII VTK polydata; ``point_data`` maps names to per-vertex scalars."""
    verts, faces = surface_quads(geometry)
    path = Path(path)
    out = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
           "DATASET POLYDATA", f"POINTS {len(verts)} double"]
    out += [f"{x:.12g} {y:.12g} {z:.12g}" for x, y, z in verts]
    out.append(f"POLYGONS {len(faces)} {5 * len(faces)}")
    out += ["4 " + " ".join(map(str, f)) for f in faces]
    if point_data:
        out.append(f"POINT_DATA {len(verts)}")
        for name, vals in point_data.items():
            vals = np.asarray(vals, float).ravel()
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [f"{x:.12g}" for x in vals]
    path.write_text("\n".join(out) + "\n")
    return path


def save_geometry(geometry: CanalGeometry, path, extra: Optional[dict] = None) -> Path:
    doc = geometry.to_dict()
    if extra:
        doc.update(extra)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_geometry(path) -> CanalGeometry:
    doc = json.loads(Path(path).read_text())
    return CanalGeometry.from_dict(doc)
