"""Command-line entry point: segment | path | viewpoints | metrics | bench | export."""

from __future__ import annotations

import argparse
import configparser
import csv
import functools
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import shapes
from .ccvt import DEFAULT_RC, EnergyParams, SegmentationError, Tessellation, expected_cluster_count, save_colored_ply, segment
from .geodesic import GeneratorGraph, GeodesicError, full_mesh_generator_costs, generator_graph, make_backend
from .invariants import InvariantViolation, check_graph, check_metrics, check_path, check_segmentation, check_viewpoints, raise_if
from .mesh import MeshError, TriangleMesh, load_mesh
from .metrics import compute_metrics
from .tour import CoveragePath, TourError, open_path, three_opt_tour
from .viewpoint import (
    DEFAULT_PHI,
    DEFAULT_RS,
    DEFAULT_THETA_R,
    CandidateRayParams,
    DefaultValidityOracle,
    ViewpointError,
    plan_viewpoints,
)

logger = logging.getLogger("surfcover")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2, 3
DEFAULT_BENCH_CAP = 20_000


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# schemas


def _inline_refs(node, defs):
    # local "#/$defs/x" refs are resolved once here; per-item ref lookups dominate validation time
    if isinstance(node, dict):
        ref = node.get("$ref", "")
        if ref.startswith("#/$defs/"):
            return _inline_refs(defs[ref[len("#/$defs/"):]], defs)
        return {k: _inline_refs(v, defs) for k, v in node.items() if k != "$defs"}
    if isinstance(node, list):
        return [_inline_refs(v, defs) for v in node]
    return node


@functools.cache
def load_schema(name: str) -> dict:
    text = resources.files("surfcover").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


@functools.cache
def _validator(name: str):
    schema = load_schema(name)
    schema = _inline_refs(schema, schema.get("$defs", {}))
    return jsonschema.Draft202012Validator(schema)


def _compact(node):
    # long lists of numeric 3-vectors are checked here and collapsed to one
    # representative; the schemas constrain such items uniformly and set no maxItems
    if isinstance(node, dict):
        return {k: _compact(v) for k, v in node.items()}
    if isinstance(node, list):
        if len(node) > 8 and all(type(p) is list and len(p) == 3 for p in node):
            if all(type(x) in (int, float) for p in node for x in p):
                return node[:1]
        return [_compact(v) for v in node]
    return node


def validate(doc: dict, name: str) -> None:
    """Raise InputError if ``doc`` does not match the named schema."""
    v = _validator(name)
    doc = _compact(doc)
    if v.is_valid(doc):
        return
    e = jsonschema.exceptions.best_match(v.iter_errors(doc))
    raise InputError(f"{name}: {e.message}")


def read_json(path, schema: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f"cannot read {path}: {e}") from e
    validate(doc, schema)
    return doc


def write_json(path: Path, doc: dict, schema: str, indent=None) -> None:
    validate(doc, schema)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=indent)
        fh.write("\n")


# --------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    mesh: str = ""
    format: str | None = None
    out: Path = Path(".")
    seed: int = 0
    clusters: str = "auto"
    norm: str = "l1"
    normal_cost: bool = True
    rough: bool = False
    rc: float = DEFAULT_RC
    alpha1: float | None = None
    alpha2: float = 0.93
    alpha3: float | None = None
    alpha4: float = 7.0
    max_iterations: int = 50
    tol: float = 1e-4
    backend: str = "steiner"
    steiner_k: int = 3
    rs: float = DEFAULT_RS
    phi: float = DEFAULT_PHI
    nc: str = "auto"
    theta_r: float = DEFAULT_THETA_R
    theta0: float = math.pi / 3
    threshold: float | None = None
    rolls: int = 4
    env: list = field(default_factory=list)
    threads: int = 1
    check: bool = False

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "PipelineConfig":
        known = {k: v for k, v in vars(args).items() if k in cls.__dataclass_fields__ and v is not None}
        cfg = cls(**known)
        cfg.out = Path(cfg.out)
        return cfg

    def energy_params(self, mesh: TriangleMesh) -> EnergyParams:
        m = "auto" if str(self.clusters) == "auto" else int(self.clusters)
        over = {"alpha2": self.alpha2, "alpha4": self.alpha4, "m": m}
        if self.alpha1 is not None:
            over["alpha1"] = self.alpha1
        if self.alpha3 is not None:
            over["alpha3"] = self.alpha3
        variant = self.norm + ("n" if self.normal_cost else "")
        return EnergyParams.defaults(mesh, variant, rough=self.rough, **over)

    def candidate_params(self) -> CandidateRayParams:
        nc = "auto" if str(self.nc) == "auto" else int(self.nc)
        return CandidateRayParams(r_s=self.rs, r_c=self.rc, phi=self.phi, n_c=nc)


def _on_off(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {v!r}")


def _clusters(v: str) -> str:
    if str(v) == "auto":
        return "auto"
    if not str(v).isdigit() or int(v) < 1:
        raise argparse.ArgumentTypeError("clusters must be a positive integer or 'auto'")
    return str(int(v))


def default_threads() -> int:
    env = os.environ.get("SURFCOVER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring SURFCOVER_THREADS=%r", env)
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# loading


def read_mesh(spec: str, fmt: str | None = None) -> TriangleMesh:
    if spec.startswith("builtin:"):
        try:
            return shapes.builtin(spec[len("builtin:"):])
        except (KeyError, ValueError) as e:
            raise InputError(str(e)) from e
    if not Path(spec).is_file():
        raise InputError(f"mesh file not found: {spec}")
    return load_mesh(spec, fmt)


def read_segmentation(path, mesh: TriangleMesh) -> Tessellation:
    tess = Tessellation.from_dict(read_json(path, "segmentation"))
    if len(tess.face_to_cluster) != mesh.n_faces:
        raise InputError(f"{path} was made for {len(tess.face_to_cluster)} faces, mesh has {mesh.n_faces}")
    return tess


def _need(path: Path, what: str) -> Path:
    if not path.is_file():
        raise InputError(f"missing {what}: {path} (run the upstream command first)")
    return path


# --------------------------------------------------------------------------
# commands


def cmd_segment(cfg: PipelineConfig) -> int:
    mesh = read_mesh(cfg.mesh, cfg.format)
    params = cfg.energy_params(mesh)
    t0 = time.perf_counter()
    tess = segment(mesh, params, seed=cfg.seed, max_iterations=cfg.max_iterations, tol=cfg.tol, r_c=cfg.rc)
    logger.info("segmented %d faces into %d clusters in %.2f s (%d iterations, converged=%s)",
                mesh.n_faces, tess.m, time.perf_counter() - t0, tess.iterations, tess.converged)
    if cfg.check:
        raise_if(check_segmentation(mesh, tess))
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "seg.json", tess.to_dict(), "segmentation", indent=1)
    save_colored_ply(mesh, tess, cfg.out / "seg_colored.ply")
    with open(cfg.out / "energy_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "energy"])
        for k, e in enumerate(tess.energy_trace, start=1):
            w.writerow([k, repr(float(e))])
    print(f"{tess.m} clusters -> {cfg.out / 'seg.json'}")
    return EXIT_OK


def cmd_path(cfg: PipelineConfig) -> int:
    mesh = read_mesh(cfg.mesh, cfg.format)
    tess = read_segmentation(_need(cfg.out / "seg.json", "segmentation"), mesh)
    backend = make_backend(cfg.backend, cfg.steiner_k)
    t0 = time.perf_counter()
    graph = generator_graph(mesh, tess, backend, threads=cfg.threads)
    t1 = time.perf_counter()
    if tess.m == 1:
        path = CoveragePath(np.array([0]), 0.0, tess.generators[:1].copy())
        opened = path
    else:
        path = three_opt_tour(graph, seed=cfg.seed)
        opened = open_path(path.order, graph)
    logger.info("generator graph %.2f s, tour %.2f s", t1 - t0, time.perf_counter() - t1)
    if cfg.check:
        raise_if(check_graph(graph) + check_path(path, graph if tess.m > 1 else None))
    write_json(cfg.out / "generator_graph.json", graph.to_dict(), "generator_graph")
    doc = path.to_dict()
    doc["openPath"] = {"order": [int(i) for i in opened.order], "totalCost": float(opened.total_cost)}
    write_json(cfg.out / "path.json", doc, "coverage_path")
    path.save_obj(cfg.out / "path.obj")
    print(f"tour over {tess.m} generators, length {path.total_cost:.6g} -> {cfg.out / 'path.json'}")
    return EXIT_OK


def cmd_viewpoints(cfg: PipelineConfig) -> int:
    mesh = read_mesh(cfg.mesh, cfg.format)
    tess = read_segmentation(_need(cfg.out / "seg.json", "segmentation"), mesh)
    path = CoveragePath.from_dict(read_json(_need(cfg.out / "path.json", "coverage path"), "coverage_path"))
    if sorted(path.order.tolist()) != list(range(tess.m)):
        raise InputError("path.json does not match seg.json")
    env = [read_mesh(e) for e in cfg.env]
    params = cfg.candidate_params()
    oracle = DefaultValidityOracle(mesh, env, params.r_s)
    plan = plan_viewpoints(mesh, tess, path.order, params, env, oracle, cfg.theta_r, cfg.rolls, cfg.threads)
    if cfg.check:
        faces = [int(tess.generator_faces[i]) for i in path.order]
        raise_if(check_viewpoints(plan, mesh, cfg.rolls, faces, env, cfg.theta_r))
    doc = plan.to_dict()
    doc["order"] = [int(i) for i in path.order]
    for sel in doc["selection"]:
        sel["generator"] = int(path.order[sel["waypointIndex"]])
    write_json(cfg.out / "viewpoints.json", doc, "viewpoint_plan")
    rep = plan.configs.report()
    print(f"{rep['accepted']} accepted, {rep['corrected']} corrected, {rep['unrecoverable']} unrecoverable"
          f" -> {cfg.out / 'viewpoints.json'}")
    return EXIT_OK


def cmd_metrics(cfg: PipelineConfig) -> int:
    mesh = read_mesh(cfg.mesh, cfg.format)
    tess = read_segmentation(_need(cfg.out / "seg.json", "segmentation"), mesh)
    t0 = time.perf_counter()
    report = compute_metrics(mesh, tess, make_backend(cfg.backend, cfg.steiner_k), cfg.rc, cfg.threshold, cfg.theta0)
    report.runtime = time.perf_counter() - t0
    if cfg.check:
        raise_if(check_metrics(report))
    write_json(cfg.out / "metrics.json", report.to_dict(), "metrics", indent=1)
    report.save_csv(cfg.out / "metrics.csv")
    print(f"coverage {report.coverage_pct:.2f}%  overlap {report.overlap_pct:.2f}%  RSD {report.rsd_pct:.2f}%"
          f"  unreachable {report.unreach_pct:.2f}%  area SD {report.area_sd:.4g}")
    return EXIT_OK


def cmd_bench(cfg: PipelineConfig, force: bool = False, cap: int = DEFAULT_BENCH_CAP) -> int:
    """Time all-pairs generator distances: decomposition vs the whole mesh."""
    mesh = read_mesh(cfg.mesh, cfg.format)
    if mesh.n_faces > cap and not force:
        raise InputError(f"{mesh.n_faces} faces exceeds the full-mesh cap of {cap}; pass --force to run anyway")
    seg_path = cfg.out / "seg.json"
    if seg_path.is_file():
        tess = read_segmentation(seg_path, mesh)
    else:
        tess = segment(mesh, cfg.energy_params(mesh), seed=cfg.seed, r_c=cfg.rc)
    rows = bench_rows(mesh, tess, cfg.backend, cfg.steiner_k, cfg.threads)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    d, f = rows
    print(f"decomposition {d['seconds']:.2f} s, full mesh {f['seconds']:.2f} s "
          f"(speedup {f['seconds'] / d['seconds']:.1f}x, dominance violations {d['violations']})")
    return EXIT_OK


def bench_rows(mesh, tess, backend_name="steiner", k=3, threads=1) -> list[dict]:
    backend = make_backend(backend_name, k)
    backend.prepare(mesh)  # shared setup is not part of either timing
    t0 = time.perf_counter()
    graph = generator_graph(mesh, tess, backend, threads=threads)
    t_dec = time.perf_counter() - t0
    t0 = time.perf_counter()
    full = full_mesh_generator_costs(mesh, tess, backend)
    t_full = time.perf_counter() - t0
    iu = np.triu_indices(tess.m, 1)
    ratio = graph.cost_matrix()[iu] / full[iu]
    common = {"faces": mesh.n_faces, "m": tess.m, "pairs": len(iu[0])}
    return [
        {"method": "decomposition", **common, "seconds": t_dec, "violations": int((ratio < 1.0).sum()),
         "median_ratio": float(np.median(ratio)), "max_ratio": float(ratio.max())},
        {"method": "full_mesh", **common, "seconds": t_full, "violations": 0, "median_ratio": 1.0, "max_ratio": 1.0},
    ]


def cmd_export(cfg: PipelineConfig, what: str, dest: str | None) -> int:
    """Re-export stored results: colored PLY, path OBJ, or the mesh itself."""
    mesh = read_mesh(cfg.mesh, cfg.format)
    if what == "ply":
        tess = read_segmentation(_need(cfg.out / "seg.json", "segmentation"), mesh)
        target = Path(dest or cfg.out / "seg_colored.ply")
        save_colored_ply(mesh, tess, target)
    elif what == "path-obj":
        path = CoveragePath.from_dict(read_json(_need(cfg.out / "path.json", "coverage path"), "coverage_path"))
        target = Path(dest or cfg.out / "path.obj")
        path.save_obj(target)
    elif what == "mesh":
        from .mesh import save_obj

        target = Path(dest or cfg.out / "mesh.obj")
        save_obj(mesh, target)
    else:  # pragma: no cover - argparse restricts the choices
        raise InputError(f"unknown export {what!r}")
    print(f"wrote {target}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


SECTION_KEYS = {
    "segment": ("clusters", "norm", "normal_cost", "rough", "alpha1", "alpha2", "alpha3", "alpha4", "max_iterations", "tol"),
    "path": ("backend", "steiner_k"),
    "viewpoints": ("rs", "phi", "nc", "theta_r", "rolls", "env"),
    "metrics": ("threshold", "theta0"),
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mesh", help="mesh file (OBJ/STL/PLY) or builtin:NAME[:ARG]")
    p.add_argument("--format", choices=["obj", "stl", "ply"])
    p.add_argument("--out", help="output directory (default: current)")
    p.add_argument("--seed", type=int)
    p.add_argument("--rc", type=float, help="nozzle radius r_c in metres")
    p.add_argument("--backend", choices=["steiner", "exact"], help="geodesic backend (exact needs pygeodesic)")
    p.add_argument("--steiner-k", dest="steiner_k", type=int, help="Steiner points per edge")
    p.add_argument("--check", action="store_true", default=None, help="verify invariants on the outputs")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)


def _segment_flags(p):
    p.add_argument("--clusters", type=_clusters, help="cluster count or 'auto'")
    p.add_argument("--norm", choices=["l1", "l2"])
    p.add_argument("--normal-cost", dest="normal_cost", type=_on_off)
    p.add_argument("--rough", type=_on_off, help="use the rough-surface alpha3 default")
    for a in ("alpha1", "alpha2", "alpha3", "alpha4"):
        p.add_argument(f"--{a}", type=float)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--tol", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surfcover", description="Coverage paths and viewpoints on triangle meshes.")
    parser.add_argument("--config", help="INI file with [common] and per-command sections")
    parser.add_argument("--threads", type=int, help="worker threads (default $SURFCOVER_THREADS or all cores)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("segment", help="CCVT segmentation -> seg.json, seg_colored.ply, energy_trace.csv")
    _common(p)
    _segment_flags(p)

    p = sub.add_parser("path", help="generator geodesics and 3-opt tour -> path.json")
    _common(p)

    p = sub.add_parser("viewpoints", help="viewpoint rays, correction and pose selection -> viewpoints.json")
    _common(p)
    p.add_argument("--rs", type=float, help="standoff distance r_s")
    p.add_argument("--phi", type=float, help="candidate cap angle (rad)")
    p.add_argument("--nc", help="candidate count or 'auto'")
    p.add_argument("--theta-r", dest="theta_r", type=float, help="max ray elevation from +z (rad)")
    p.add_argument("--rolls", type=int, help="roll angles per ray (I)")
    p.add_argument("--env", action="append", help="environment mesh (repeatable)")

    p = sub.add_parser("metrics", help="coverage, overlap, RSD, unreachable faces -> metrics.json/csv")
    _common(p)
    p.add_argument("--threshold", type=float, help="coverage distance threshold (default r_c)")
    p.add_argument("--theta0", type=float, help="unreachable-face angle (rad)")

    p = sub.add_parser("bench", help="decomposition vs full-mesh geodesic timing -> bench.csv")
    _common(p)
    _segment_flags(p)
    p.add_argument("--force", action="store_true", help="allow meshes above the face-count cap")
    p.add_argument("--max-faces", dest="max_faces", type=int, default=DEFAULT_BENCH_CAP)

    p = sub.add_parser("export", help="re-export stored results")
    _common(p)
    p.add_argument("what", choices=["ply", "path-obj", "mesh"])
    p.add_argument("dest", nargs="?")
    return parser


def read_config(path: str | None, command: str) -> dict:
    """Flat defaults from ``[common]`` and the command's own section(s)."""
    if not path:
        return {}
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise InputError(f"cannot read config file {path}")
    out = {}
    sections = ["common", command]
    if command == "bench":
        sections.insert(1, "segment")
    for sec in sections:
        if cp.has_section(sec):
            for k, v in cp.items(sec):
                out[k.replace("-", "_")] = v
    return out


def _coerce(key: str, value: str):
    spec = PipelineConfig.__dataclass_fields__.get(key)
    if spec is None:
        raise InputError(f"unknown config key {key!r}")
    t = str(spec.type)
    if key in ("normal_cost", "rough", "check"):
        return _on_off(value)
    if key == "env":
        return [s for s in value.split() if s]
    if key in ("clusters", "nc"):
        return value.strip()
    if "int" in t:
        return int(value)
    if "float" in t:
        return float(value)
    return value


def parse(argv=None) -> tuple[argparse.Namespace, PipelineConfig]:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {k: _coerce(k, v) for k, v in read_config(args.config, args.command).items()}
    merged = dict(defaults)
    merged.update({k: v for k, v in vars(args).items() if v is not None})
    if merged.get("threads") is None:
        merged["threads"] = default_threads()
    ns = argparse.Namespace(**merged)
    cfg = PipelineConfig.from_args(ns)
    if not cfg.mesh:
        parser.error("--mesh is required (flag or config file)")
    return args, cfg


def main(argv=None) -> int:
    try:
        args, cfg = parse(argv)
    except InputError as e:
        print(f"surfcover: {e}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "segment":
            return cmd_segment(cfg)
        if args.command == "path":
            return cmd_path(cfg)
        if args.command == "viewpoints":
            return cmd_viewpoints(cfg)
        if args.command == "metrics":
            return cmd_metrics(cfg)
        if args.command == "bench":
            return cmd_bench(cfg, force=args.force, cap=args.max_faces)
        if args.command == "export":
            return cmd_export(cfg, args.what, args.dest)
    except InvariantViolation as e:
        print(f"surfcover: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (InputError, MeshError, OSError, ValueError, SegmentationError, GeodesicError, TourError, ViewpointError) as e:
        print(f"surfcover: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
