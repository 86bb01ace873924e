"""Batch command-line front end.

Subcommands ``check-k``, ``synth``, ``forward``, ``invert`` and ``export``
write their results to an output directory together with a manifest of
SHA-256 digests; ``verify`` re-checks such a directory. Every output file
carries the hash of the effective configuration.

Exit codes: 0 success, 1 domain refusal (admissibility, inverse crime,
divergence), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .forward import (
    InadmissibleWavenumberError,
    InverseCrimeError,
    NearResonanceError,
    geometry_hash,
    make_synthetic,
    solve_dirichlet,
)
from .geometry.canal import CanalGeometry
from .geometry.io import export_obj, export_vtk, load_geometry, save_geometry
from .geometry.width import check_wavenumber
from .inverse import radial_error, reconstruct, write_history
from .plotting import plot_history, plot_trace, plot_wall_offsets
from .potentials import CauchyDatum, DataMismatchError, read_datum, write_datum

log = logging.getLogger(__name__)

EXIT_OK, EXIT_REFUSED, EXIT_USAGE = 0, 1, 2
MANIFEST_SUFFIX = ".manifest.json"


class Refusal(RuntimeError):
    """A domain condition stops the command (exit status 1)."""


# ---------------------------------------------------------------------------
# Output bookkeeping
# ---------------------------------------------------------------------------
def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(doc: dict, path: Path) -> Path:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


class Outputs:
    """Output directory that records every written file in a manifest."""

    def __init__(self, directory, command: str, config: RunConfig):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.files: list[Path] = []

    @property
    def hash(self) -> str:
        return self.config.hash

    def path(self, name: str) -> Path:
        return self.dir / name

    def add(self, path: Path) -> Path:
        self.files.append(Path(path))
        return path

    def json(self, name: str, doc: dict) -> Path:
        return self.add(_dump_json({"config_hash": self.hash, **doc}, self.path(name)))

    def finish(self) -> Path:
        self.json(f"{self.command}.config.json", {"config": json.loads(self.config.canonical())})
        manifest = {"command": self.command, "config_hash": self.hash, "version": __version__,
                    "files": {p.name: _sha256(p) for p in self.files}}
        return _dump_json(manifest, self.path(self.command + MANIFEST_SUFFIX))


def verify_directory(directory) -> list[str]:
    """Problems found in the manifests of ``directory`` (empty when intact)."""
    directory = Path(directory)
    manifests = sorted(directory.glob("*" + MANIFEST_SUFFIX))
    if not manifests:
        return [f"{directory}: no manifest found"]
    problems = []
    for man in manifests:
        doc = json.loads(man.read_text())
        tag = doc["config_hash"].encode()
        for name, digest in doc["files"].items():
            p = directory / name
            if not p.exists():
                problems.append(f"{name}: missing")
            elif _sha256(p) != digest:
                problems.append(f"{name}: digest mismatch")
            elif tag not in p.read_bytes():
                problems.append(f"{name}: config hash not embedded")
    return problems


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def _admissibility(cfg: RunConfig, geometry: CanalGeometry, force: bool, out: Outputs) -> dict:
    rep = check_wavenumber(cfg.k, geometry)
    if not rep.admissible:
        msg = f"k={cfg.k} is not certified admissible (k^2={rep.k_squared:.4g} >= bound {rep.bound:.4g})"
        if not force:
            raise Refusal(msg + "; use --force to proceed")
        log.warning("%s; proceeding because of --force", msg)
    return rep.to_dict()


def cmd_check_k(cfg: RunConfig, args) -> int:
    out = Outputs(args.out, "check-k", cfg)
    geo = cfg.geometry.build()
    rep = check_wavenumber(cfg.k, geo)
    out.json("check_k.json", {"k": cfg.k, "report": rep.to_dict()})
    out.finish()
    verdict = "admissible" if rep.admissible else "NOT admissible"
    print(f"k={cfg.k:g}: {verdict}; width d={rep.d:.6g}, bound 1/d^2={rep.bound:.6g}, "
          f"margin {rep.margin:.6g}")
    return EXIT_OK if rep.admissible else EXIT_REFUSED


def cmd_synth(cfg: RunConfig, args) -> int:
    out = Outputs(args.out, "synth", cfg)
    geo = cfg.geometry.build()
    adm = _admissibility(cfg, geo, args.force, out)
    spec = cfg.mesh.spec()
    names = []
    for i, exc in enumerate(cfg.excitations):
        datum = make_synthetic(geo, exc.build(), cfg.k, spec, cfg.mesh.fine_factor, cfg.noise_level,
                               seed=cfg.seed + i, allow_inverse_crime=args.allow_inverse_crime,
                               check_k=False)
        name = f"data_{i}.csv"
        out.add(write_datum(datum, out.path(name), {"config_hash": out.hash}))
        out.add(plot_trace(datum, out.path(f"data_{i}.png"), out.hash))
        names.append(name)
        log.info("wrote %s (disc. error estimate %.2e)", name,
                 datum.provenance.get("disc_error_estimate", float("nan")))
    out.json("synth.json", {"files": names, "truth_geometry_hash": geometry_hash(geo),
                            "admissibility": adm})
    out.add(save_geometry(geo, out.path("truth_geometry.json"), {"config_hash": out.hash}))
    out.finish()
    print(f"wrote {len(names)} data file(s) to {out.dir}")
    return EXIT_OK


def cmd_forward(cfg: RunConfig, args) -> int:
    out = Outputs(args.out, "forward", cfg)
    geo = cfg.geometry.build()
    adm = _admissibility(cfg, geo, args.force, out)
    spec = cfg.mesh.spec()
    rows = []
    for i, exc in enumerate(cfg.excitations):
        sol = solve_dirichlet(geo, exc.build(), cfg.k, spec, check_k=False)
        datum = CauchyDatum(cfg.k, sol.f_values, sol.u_N_on_F, sol.membrane_mesh,
                            {"excitation": exc.build().to_dict()})
        out.add(write_datum(datum, out.path(f"forward_{i}.csv"), {"config_hash": out.hash}))
        out.add(plot_trace(datum, out.path(f"forward_{i}.png"), out.hash))
        rows.append({"excitation": i, "residual": sol.residual, "condition": sol.condition,
                     "n_unknowns": int(len(sol.sigma))})
    out.json("forward.json", {"solves": rows, "admissibility": adm})
    out.finish()
    print(f"forward solve(s) written to {out.dir}")
    return EXIT_OK


def _read_data(paths: Sequence[str], mesh) -> list[CauchyDatum]:
    data = []
    for p in paths:
        try:
            data.append(read_datum(p, mesh))
        except FileNotFoundError:
            raise ConfigError(f"{p}: no such data file") from None
    return data


def cmd_invert(cfg: RunConfig, args) -> int:
    out = Outputs(args.out, "invert", cfg)
    initial = cfg.initial_geometry()
    truth = cfg.truth_geometry()
    spec = cfg.mesh.spec()
    paths = list(args.data) or cfg.inverse.data
    if not paths:
        raise ConfigError("invert: no data files given (positional arguments or inverse.data)")
    data = _read_data(paths, spec.membrane_mesh(initial))
    if any(d.k != cfg.k for d in data):
        raise DataMismatchError(f"data wavenumber differs from config k={cfg.k}")
    adm = _admissibility(cfg, initial, args.force, out)
    opts = cfg.inverse.options(cfg.noise_level, allow_inverse_crime=args.allow_inverse_crime,
                               check_k=False)
    res = reconstruct(data, initial, opts, spec)
    radius = float(np.linalg.norm(initial.wall.reference.points(0.5, 0.0) - initial.wall.reference.origin)) \
        if hasattr(initial.wall, "reference") else None
    summary = {
        "status": res.status, "iterations": res.iterations,
        "residual_initial": res.residual_initial, "residual_final": res.residual_final,
        "reduction": res.reduction, "block_norms": res.block_norms,
        "discrepancy_target": res.target, "admissibility": adm,
        "data_files": [Path(p).name for p in paths], "options": opts.to_dict(),
        "final_offsets": res.geometry.wall.offsets,
    }
    if truth is not None and radius is not None:
        summary["radial_error"] = radial_error(res.geometry.wall, truth.wall, radius)
        summary["radial_error_initial"] = radial_error(initial.wall, truth.wall, radius)
    head = {"config_hash": out.hash}
    write_history(res.history, out.path("history.csv"), head)
    out.add(out.path("history.csv"))
    out.json("summary.json", summary)
    out.add(save_geometry(res.geometry, out.path("geometry.json"), head))
    out.add(export_obj(res.geometry, out.path("geometry.obj"), f"config_hash {out.hash}"))
    out.add(export_vtk(res.geometry, out.path("geometry.vtk"), f"config_hash {out.hash}"))
    out.add(plot_history(res.history, out.path("history.png"), out.hash))
    if radius is not None:
        out.add(plot_wall_offsets(res.geometry.wall, out.path("wall_offsets.png"), radius,
                                  None if truth is None else truth.wall, out.hash))
    out.finish()
    print(f"invert: {res.status} after {res.iterations} iteration(s); residual "
          f"{res.residual_initial:.4e} -> {res.residual_final:.4e}"
          + (f"; radial error {summary['radial_error']:.3%}" if "radial_error" in summary else ""))
    return EXIT_REFUSED if res.status == "diverged" else EXIT_OK


def cmd_export(cfg: RunConfig, args) -> int:
    out = Outputs(args.out, "export", cfg)
    geo = load_geometry(args.geometry) if args.geometry else cfg.geometry.build()
    stem = args.name
    out.add(export_obj(geo, out.path(stem + ".obj"), f"config_hash {out.hash}"))
    out.add(export_vtk(geo, out.path(stem + ".vtk"), f"config_hash {out.hash}"))
    out.add(save_geometry(geo, out.path(stem + ".json"), {"config_hash": out.hash}))
    out.finish()
    print(f"exported {stem}.obj, {stem}.vtk, {stem}.json to {out.dir}")
    return EXIT_OK


COMMANDS = {"check-k": cmd_check_k, "synth": cmd_synth, "forward": cmd_forward,
            "invert": cmd_invert, "export": cmd_export}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canalshape", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="JSON run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory (default: config 'out')")
    common.add_argument("--seed", type=int, metavar="N", help="override the configured seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded linear algebra for reproducible bytes")
    common.add_argument("--force", action="store_true",
                        help="proceed when k is not certified admissible")
    common.add_argument("--allow-inverse-crime", action="store_true",
                        help="accept data generated on the inversion discretization")
    common.add_argument("--max-iters", type=int, metavar="N", help="override inverse.max_iters")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("check-k", parents=[common], help="admissibility of the wavenumber")
    sub.add_parser("synth", parents=[common], help="synthetic Cauchy data")
    sub.add_parser("forward", parents=[common], help="forward solve on the configured surface")
    p = sub.add_parser("invert", parents=[common], help="reconstruct the wall from data files")
    p.add_argument("data", nargs="*", help="Cauchy data files (default: inverse.data)")
    p = sub.add_parser("export", parents=[common], help="export a surface as OBJ, VTK and JSON")
    p.add_argument("--geometry", metavar="PATH", help="geometry JSON to export instead of the config's")
    p.add_argument("--name", default="surface", help="output file stem")
    p = sub.add_parser("verify", help="re-check digests and config hashes of an output directory")
    p.add_argument("directory")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        problems = verify_directory(args.directory)
        for p in problems:
            print(f"FAIL {p}")
        if not problems:
            print(f"OK {args.directory}")
        return EXIT_REFUSED if problems else EXIT_OK
    if args.max_iters is not None and args.max_iters < 0:
        parser.error("--max-iters must be >= 0")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, max_iters=args.max_iters)
        args.out = cfg.out
        limits = threadpool_limits(1) if args.deterministic else nullcontext()
        with limits:
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, DataMismatchError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (Refusal, InverseCrimeError, InadmissibleWavenumberError, NearResonanceError) as err:
        print(f"refused: {err}", file=sys.stderr)
        return EXIT_REFUSED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
