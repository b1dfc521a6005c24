"""Command-line interface: ingest, field, query, render, bench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import export
from .fields import (
    Backend,
    KernelConfig,
    MissingField,
    OutOfExtent,
    ParamField,
    build_gp,
    build_raster,
    grid_points,
    load_starmap,
    raster_mae,
    save_starmap,
)
from .geometry import BBox, GeoOrigin, Map
from .ingest import (
    EmptyMapError,
    SourceError,
    TagMapping,
    annotate_uniform,
    build_map_with_report,
    load_map,
    load_source,
    save_map,
)
from .logic import Method, ProgramError, UndefinedAtom, parse_atom, parse_program, query, query_field, ground_program
from .relations import Comparison, RelationKind, prob_threshold_many
from .uam import load_annotations, sample_collection

log = logging.getLogger("starmaps")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_EMPTY = 3
EXIT_FIELD = 4
EXIT_PROGRAM = 5
EXIT_MISSING_FIELD = 6

THREADS_ENV = "STARMAPS_THREADS"


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Everything a run depends on besides its input files."""

    command: str
    map_path: str | None = None
    input_path: str | None = None
    input_format: str | None = None
    origin: tuple[float, float] | None = None
    bbox: tuple[float, float, float, float] | None = None
    extent: tuple[float, float, float, float] | None = None
    mapping_path: str | None = None
    uncertainty: float | None = None
    uncertainty_semantics: str = "stddev"
    annotations_path: str | None = None
    relations: list[tuple[str, str]] = field(default_factory=list)
    backend: str = "raster"
    resolution: int = 64
    seed_points: int = 256
    batch: int = 16
    rounds: int = 5
    candidates: int = 64
    tune: bool = False
    n_samples: int = 50
    seed: int = 0
    thresholds: list[str] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("origin", "bbox", "extent"):
            if d[k] is not None:
                d[k] = list(d[k])
        d["relations"] = [list(r) for r in self.relations]
        return d


def _floats(text: str, n: int, what: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated numbers") from None
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated numbers")
    return vals


def _relation_spec(text: str) -> tuple[str, str]:
    rel, _, tag = text.partition(":")
    if not tag or rel not in {k.value for k in RelationKind}:
        raise argparse.ArgumentTypeError(f"relation spec {text!r} must look like distance:road or over:building")
    return rel, tag


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _demo_source() -> Path:
    return Path(str(resources.files("starmaps.data").joinpath("demo_town.osm")))


# ---------------------------------------------------------------------------
# shared steps


def _ingest(cfg: RunConfig):
    path = Path(cfg.input_path) if cfg.input_path else _demo_source()
    fmt = cfg.input_format or ("overpass_json" if path.suffix == ".json" else "osm_xml")
    try:
        raw = load_source(path, fmt)
    except SourceError as exc:
        raise CommandError(str(exc), EXIT_INPUT) from None
    if cfg.origin is not None:
        origin = GeoOrigin(*cfg.origin)
    else:
        coords = np.array([c for r in raw for c in r.coords]) if raw else np.zeros((1, 2))
        origin = GeoOrigin(*np.round(coords.mean(axis=0), 6).tolist())
    mapping = TagMapping.load(cfg.mapping_path) if cfg.mapping_path else TagMapping.default()
    bbox = BBox(*cfg.bbox) if cfg.bbox else None
    try:
        return build_map_with_report(raw, mapping, origin, bbox)
    except EmptyMapError as exc:
        raise CommandError(str(exc), EXIT_EMPTY) from None
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_INPUT) from None


def _load_map(cfg: RunConfig) -> Map:
    if cfg.map_path:
        try:
            return load_map(cfg.map_path)
        except (OSError, ValueError, KeyError) as exc:
            raise CommandError(f"cannot load map {cfg.map_path}: {exc}", EXIT_INPUT) from None
    return _ingest(cfg)[0]


def _uam(cfg: RunConfig, m: Map):
    if cfg.annotations_path:
        try:
            return load_annotations(m, cfg.annotations_path)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CommandError(f"cannot load annotations {cfg.annotations_path}: {exc}", EXIT_INPUT) from None
    return annotate_uniform(m, 10.0 if cfg.uncertainty is None else cfg.uncertainty, cfg.uncertainty_semantics)


def _extent(cfg: RunConfig, m: Map) -> BBox:
    if cfg.extent:
        return BBox(*cfg.extent)
    if cfg.bbox:
        return BBox(*cfg.bbox)
    return m.bbox


def _parse_threshold(text: str) -> tuple[str | None, Comparison, float]:
    for sym, op in ((">", Comparison.GREATER), ("<", Comparison.LESS)):
        if sym in text:
            lhs, rhs = text.split(sym, 1)
            rel, _, tag = lhs.strip().partition(":")
            if rel != RelationKind.DISTANCE.value:
                break
            try:
                return (tag or None), op, float(rhs)
            except ValueError:
                break
    raise CommandError(f"threshold {text!r} must look like distance>30 or distance:road<15", EXIT_INPUT)


def _layer_name(rel: str, tag: str, param: str) -> str:
    return f"{rel}_{tag}_{param}"


def _write_meta(path: Path, cfg: RunConfig) -> None:
    Path(f"{path}.meta.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: RunConfig) -> int:
    m, report = _ingest(cfg)
    out = cfg.outputs.get("map")
    if out:
        save_map(m, out)
    for tag, n in report.counts.items():
        print(f"{tag}\t{n}")
    print(f"features\t{len(m.features)}")
    if report.unmatched or report.outside_bbox:
        print(f"dropped\tunmatched={report.unmatched} outside_bbox={report.outside_bbox}")
    return EXIT_OK


def cmd_field(cfg: RunConfig) -> int:
    m = _load_map(cfg)
    uam = _uam(cfg, m)
    extent = _extent(cfg, m)
    relations = cfg.relations or [("distance", "road")]
    try:
        collection = sample_collection(uam, cfg.n_samples, cfg.seed, workers=_threads())
        starmap = None
        for rel, tag in relations:
            if cfg.backend == Backend.RASTER.value:
                starmap = build_raster(collection, rel, tag, extent, (cfg.resolution, cfg.resolution), starmap=starmap)
            else:
                starmap = build_gp(
                    collection, rel, tag, extent,
                    candidates_resolution=(cfg.candidates, cfg.candidates),
                    seed_points=cfg.seed_points, batch=cfg.batch, rounds=cfg.rounds, seed=cfg.seed,
                    kernel=KernelConfig(tune=cfg.tune), starmap=starmap,
                ).starmap
    except (ValueError, LookupError, np.linalg.LinAlgError) as exc:
        raise CommandError(f"field construction failed: {exc}", EXIT_FIELD) from None
    starmap.source = uam
    starmap.metadata = {"config": cfg.to_dict(), "origin": [m.origin.latitude, m.origin.longitude]}
    out = cfg.outputs.get("starmap")
    if out:
        save_starmap(starmap, out)

    nodes = grid_points(extent, cfg.resolution, cfg.resolution)
    layers: dict[str, np.ndarray] = {}
    for (rel, tag, k), f in sorted(starmap.fields.items(), key=lambda kv: (kv[0][0].value, kv[0][1], kv[0][2])):
        layers[_layer_name(rel.value, tag, f.param_name)] = f(nodes).reshape(cfg.resolution, cfg.resolution)
    for text in cfg.thresholds:
        tag, op, thr = _parse_threshold(text)
        for rel, rtag in relations:
            if rel != "distance" or (tag is not None and rtag != tag):
                continue
            mean = layers[_layer_name(rel, rtag, "mean")]
            var = layers[_layer_name(rel, rtag, "variance")]
            sym = "gt" if op is Comparison.GREATER else "lt"
            layers[f"p_{rel}_{rtag}_{sym}_{thr:g}"] = prob_threshold_many(mean, var, op, thr)
    _export(cfg, layers, extent, m.origin)
    for name, v in layers.items():
        print(f"{name}\tmin={v.min():.6g}\tmax={v.max():.6g}")
    return EXIT_OK


def _export(cfg: RunConfig, layers: dict[str, np.ndarray], extent: BBox, origin: GeoOrigin) -> None:
    csv_dir = cfg.outputs.get("csv_dir")
    if csv_dir:
        Path(csv_dir).mkdir(parents=True, exist_ok=True)
        for name, v in layers.items():
            path = Path(csv_dir) / f"{name}.csv"
            export.write_raster_csv(path, v, extent)
            _write_meta(path, cfg)
    gj = cfg.outputs.get("geojson")
    if gj:
        export.write_geojson(gj, export.raster_geojson(layers, extent, origin, {"config": cfg.to_dict()}))


def cmd_query(cfg: RunConfig, program_path: str, query_text: str, at=None, method: str = "auto",
              mc_samples: int | None = None) -> int:
    try:
        program = parse_program(Path(program_path).read_text(encoding="utf-8"))
        atom = parse_atom(query_text)
    except OSError as exc:
        raise CommandError(f"cannot read program {program_path}: {exc.strerror}", EXIT_PROGRAM) from None
    except ProgramError as exc:
        raise CommandError(f"{program_path}:{exc}" if exc.line else str(exc), EXIT_PROGRAM) from None
    starmap_path = cfg.outputs.get("starmap_in")
    try:
        starmap = load_starmap(starmap_path) if starmap_path else None
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError(f"cannot load StaR Map {starmap_path}: {exc}", EXIT_MISSING_FIELD) from None
    try:
        if at is not None:
            g = ground_program(program, starmap, at)
            res = query(g, atom, method, mc_samples or 1_000_000, cfg.seed)
            extra = f"\tstderr={res.mc_stderr:.3g}" if res.mc_stderr is not None else ""
            print(f"{res.atom}\t{res.probability:.6f}\t{res.method.value}{extra}")
            return EXIT_OK
        if starmap is None:
            raise CommandError("a field query needs --starmap", EXIT_MISSING_FIELD)
        extent = BBox(*cfg.extent) if cfg.extent else next(iter(starmap.fields.values())).extent
        pts = grid_points(extent, cfg.resolution, cfg.resolution)
        values = query_field(program, starmap, atom, pts, method, mc_samples or 10_000, cfg.seed)
    except MissingField as exc:
        raise CommandError(str(exc.args[0]), EXIT_MISSING_FIELD) from None
    except OutOfExtent as exc:
        raise CommandError(str(exc), EXIT_MISSING_FIELD) from None
    except ProgramError as exc:
        raise CommandError(str(exc), EXIT_PROGRAM) from None
    raster = values.reshape(cfg.resolution, cfg.resolution)
    origin = GeoOrigin(*starmap.metadata.get("origin", [0.0, 0.0]))
    if cfg.outputs.get("csv"):
        export.write_raster_csv(cfg.outputs["csv"], raster, extent)
        _write_meta(Path(cfg.outputs["csv"]), cfg)
    if cfg.outputs.get("geojson"):
        doc = export.raster_geojson({f"p_{atom.predicate}": raster}, extent, origin, {"config": cfg.to_dict()})
        export.write_geojson(cfg.outputs["geojson"], doc)
    print(f"{atom}\tmin={raster.min():.6f}\tmax={raster.max():.6f}\tmean={raster.mean():.6f}")
    return EXIT_OK


def cmd_render(raster_path: str, output: str) -> int:
    try:
        values, _ = export.read_raster_csv(raster_path)
    except export.RasterFileError as exc:
        raise CommandError(str(exc), EXIT_FIELD) from None
    lo, hi = export.write_ppm(output, values)
    print(f"legend\tlow={lo:.6g}\thigh={hi:.6g}")
    print(f"size\t{values.shape[1]}x{values.shape[0]}")
    return EXIT_OK


def run_bench(cfg: RunConfig, reference: int = 256, resolutions=(8, 16, 32, 64, 128), repeats: int = 3):
    """Grid-resolution and GP-refinement sweeps against one shared reference.

    Returns a list of row dicts; times are the best of ``repeats`` runs.
    """
    m = _load_map(cfg)
    uam = _uam(cfg, m)
    extent = _extent(cfg, m)
    rel, tag = (cfg.relations or [("distance", "road")])[0]
    collection = sample_collection(uam, cfg.n_samples, cfg.seed, workers=_threads())
    ref = build_raster(collection, rel, tag, extent, (reference, reference), keep_samples=False)
    ref_field = ref.field_for(rel, tag, 0)
    rows = []
    for k in resolutions:
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            sm = build_raster(collection, rel, tag, extent, (k, k), keep_samples=False)
            best = min(best, time.perf_counter() - t0)
        mae = raster_mae(sm.field_for(rel, tag, 0), ref_field)
        rows.append({"method": "grid", "setting": f"{k}x{k}", "locations": k * k,
                     "relation_samples": k * k * len(collection), "seconds": best, "mae": mae})
    t0 = time.perf_counter()
    res = build_gp(collection, rel, tag, extent, candidates_resolution=(cfg.candidates, cfg.candidates),
                   seed_points=cfg.seed_points, batch=cfg.batch, rounds=cfg.rounds, seed=cfg.seed,
                   kernel=KernelConfig(tune=cfg.tune), keep_samples=False)
    total = time.perf_counter() - t0
    for r, model in enumerate(res.history):
        f = ParamField(RelationKind(rel), tag, 0, Backend.GP, extent, gp=model)
        n = len(model.inputs)
        rows.append({"method": "gp", "setting": f"round {r}", "locations": n,
                     "relation_samples": n * len(collection), "seconds": total if r == len(res.history) - 1 else float("nan"),
                     "mae": raster_mae(f, ref_field)})
    return rows


def cmd_bench(cfg: RunConfig, reference: int = 256, resolutions=(8, 16, 32, 64, 128), repeats: int = 3) -> int:
    try:
        rows = run_bench(cfg, reference, resolutions, repeats)
    except (ValueError, LookupError, np.linalg.LinAlgError) as exc:
        raise CommandError(f"benchmark failed: {exc}", EXIT_FIELD) from None
    fields = ["method", "setting", "locations", "relation_samples", "seconds", "mae"]
    out = cfg.outputs.get("csv")
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "seconds": f"{r['seconds']:.6f}", "mae": repr(r["mae"])})
    finally:
        if out:
            fh.close()
    if out:
        _write_meta(Path(out), cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, *, source=True, field_opts=True):
    if source:
        p.add_argument("--map", dest="map_path", help="map file written by 'ingest'")
        p.add_argument("--input", dest="input_path", help="OSM XML / Overpass JSON (default: bundled demo town)")
        p.add_argument("--format", dest="input_format", choices=["osm_xml", "overpass_json"])
        p.add_argument("--origin", type=lambda s: _floats(s, 2, "--origin"), help="lat,lon of the local frame")
        p.add_argument("--bbox", type=lambda s: _floats(s, 4, "--bbox"), help="xmin,ymin,xmax,ymax in meters")
        p.add_argument("--mapping", dest="mapping_path", help="tag mapping JSON")
    if field_opts:
        p.add_argument("--uncertainty", type=float, help="translation stddev per axis in meters (default 10)")
        p.add_argument("--uncertainty-semantics", choices=["stddev", "variance"], default="stddev")
        p.add_argument("--annotations", dest="annotations_path", help="UAM annotation JSON")
        p.add_argument("--relation", dest="relations", action="append", type=_relation_spec, default=[],
                       help="relation:tag, repeatable (default distance:road)")
        p.add_argument("--extent", type=lambda s: _floats(s, 4, "--extent"), help="xmin,ymin,xmax,ymax")
        p.add_argument("--backend", choices=["raster", "gp"], default="raster")
        p.add_argument("--seed-points", type=int, default=256)
        p.add_argument("--batch", type=int, default=16)
        p.add_argument("--rounds", type=int, default=5)
        p.add_argument("--candidates", type=int, default=64, help="candidate grid size for GP refinement")
        p.add_argument("--tune", action="store_true", help="marginal-likelihood search of GP hyperparameters")
        p.add_argument("--n-samples", type=int, default=50)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="starmaps", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load an OSM extract into a map file")
    _add_common(p, field_opts=False)
    p.add_argument("--output", "-o", help="map JSON to write")

    p = sub.add_parser("field", help="build a StaR Map")
    _add_common(p)
    p.add_argument("--threshold", dest="thresholds", action="append", default=[],
                   help="add P(distance > t) rasters, e.g. 'distance>30'")
    p.add_argument("--output", "-o", help="StaR Map archive to write")
    p.add_argument("--csv-dir", help="directory for per-layer raster CSVs")
    p.add_argument("--geojson", help="GeoJSON with one cell per raster node")

    p = sub.add_parser("query", help="evaluate a logic program on a StaR Map")
    p.add_argument("--starmap", required=False, help="StaR Map archive")
    p.add_argument("--program", required=True)
    p.add_argument("--query", dest="query_text", required=True, help="query atom, e.g. 'airspace(X)'")
    p.add_argument("--at", type=lambda s: _floats(s, 2, "--at"), help="single point x,y")
    p.add_argument("--extent", type=lambda s: _floats(s, 4, "--extent"))
    p.add_argument("--method", choices=[m.value for m in Method], default="auto")
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="probability raster CSV")
    p.add_argument("--geojson")

    p = sub.add_parser("render", help="render a raster CSV as a PPM heatmap")
    p.add_argument("raster")
    p.add_argument("--output", "-o", required=True)

    p = sub.add_parser("bench", help="grid vs GP accuracy/time sweep")
    _add_common(p)
    p.add_argument("--reference", type=int, default=256, help="reference raster size (512 for full scale)")
    p.add_argument("--resolutions", default="8,16,32,64,128")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--output", "-o", help="CSV path (default stdout)")
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig(command=args.command)
    for name in ("map_path", "input_path", "input_format", "origin", "bbox", "extent", "mapping_path",
                 "uncertainty", "uncertainty_semantics", "annotations_path", "relations", "backend",
                 "resolution", "seed_points", "batch", "rounds", "candidates", "tune", "n_samples", "seed",
                 "thresholds"):
        if hasattr(args, name) and getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    if args.command == "ingest" and args.output:
        cfg.outputs["map"] = args.output
    if args.command == "field":
        for key, val in (("starmap", args.output), ("csv_dir", args.csv_dir), ("geojson", args.geojson)):
            if val:
                cfg.outputs[key] = val
    if args.command == "query":
        if args.starmap:
            cfg.outputs["starmap_in"] = args.starmap
        if args.csv:
            cfg.outputs["csv"] = args.csv
        if args.geojson:
            cfg.outputs["geojson"] = args.geojson
    if args.command == "bench" and args.output:
        cfg.outputs["csv"] = args.output
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = _config_from_args(args)
    try:
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "field":
            return cmd_field(cfg)
        if args.command == "query":
            return cmd_query(cfg, args.program, args.query_text, args.at, args.method, args.mc_samples)
        if args.command == "render":
            return cmd_render(args.raster, args.output)
        if args.command == "bench":
            res = tuple(int(v) for v in args.resolutions.split(","))
            return cmd_bench(cfg, args.reference, res, args.repeats)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
