"""
NIFT command line: imitate object-object interactions from demonstrations.

Usage:
    python main.py [--seed N] [--threads N] [-v|-q] [--config FILE] <command> [options]

Commands:
    scf             SCF descriptors of query points relative to an object
    ibs             Interaction bisector between two objects (PLY)
    train-field     Train a descriptor (or occupancy) regressor
    make-template   Build an interaction template from demonstrations
    imitate         Optimize an anchor pose on a target object
    heatmap         Feature-difference heatmap between two fields
    bench           Run a benchmark suite (report.json + report.csv)
    gen-shapes      Write procedural shapes (and demonstrations)

Structured results go to stdout (or --out); logs go to stderr.
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, List, Optional

import numpy as np
import trimesh
from pydantic import ValidationError

from config import get_runtime_config, load_config
from errors import FieldError, NiftError
from field import export_heatmap, generate_training_set, load_field, train_field
from geometry import load_geometry, save_geometry
from harness import run_benchmark
from ibs import compute_ibs, importance_indices, save_ibs
from imitate import optimize_pose, save_trace
from logging_config import configure_logging, get_logger, verbosity_to_level
from models import (
    DemoDocument,
    DirectionScheme,
    GridSpec,
    NiftConfig,
    RunConfig,
    ScfOutput,
    ShapeKind,
    ShapeSpec,
    SuiteConfig,
    TargetKind,
    TaskKind,
)
from regressor import TrainingSet
from scf import scf_batch
from shapes import anchor_kind, demo_anchor_pose, gen_shape, random_spec, shape_sampler
from template import InteractionTemplate, aggregate_templates, build_template, load_demo

logger = get_logger("nift")

TRAINING_SET_FILE = "training_set.npz"


# ── helpers ────────────────────────────────────────────────────────────────

def _emit(payload: Any, out: Optional[str]) -> None:
    """Write a JSON result to `out`, or to stdout."""
    text = json.dumps(payload, indent=2)
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")
        logger.info("Wrote %s", path)
    else:
        sys.stdout.write(text + "\n")


def _load_points(path: str) -> np.ndarray:
    """Query points from JSON (list of triples) or any point/mesh file trimesh reads."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Points file not found: {p}")
    if p.suffix.lower() == ".json":
        return np.asarray(json.loads(p.read_text(encoding="utf-8")), dtype=float).reshape(-1, 3)
    return np.asarray(trimesh.load(str(p), process=False).vertices, dtype=float)


def _out_path(args: argparse.Namespace, name: str) -> Path:
    """--out if given, else `name` inside --out-dir (or the working directory)."""
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(args.run.output_dir or ".") / name


def _update(section, **values):
    """Copy a config section with the explicitly given CLI values applied."""
    return section.model_copy(update={k: v for k, v in values.items() if v is not None})


# ── subcommands ─────────────────────────────────────────────────────────────

def cmd_scf(args: argparse.Namespace, cfg: NiftConfig) -> int:
    scf = _update(cfg.scf, order=args.order, dir_count=args.dirs, scheme=DirectionScheme(args.scheme) if args.scheme else None)
    geom = load_geometry(args.object)
    points = _load_points(args.points)
    powers = scf_batch(geom, points, scf, args.run.threads)
    result = ScfOutput(order=scf.order, dir_count=scf.dir_count, scheme=scf.scheme,
                       points=points.tolist(), descriptors=powers.tolist())
    _emit(result.model_dump(mode="json"), args.out)
    return 0


def cmd_ibs(args: argparse.Namespace, cfg: NiftConfig) -> int:
    ibs_config = _update(cfg.ibs, grid_res=args.grid_res, equidistance_tol=args.tol)
    geom_a, geom_b = load_geometry(args.a), load_geometry(args.b)
    ibs = compute_ibs(geom_a, geom_b, ibs_config, cfg.importance)
    out = _out_path(args, "ibs.ply")
    if args.samples:
        ibs = ibs.subset(importance_indices(ibs, args.samples, args.run.seed))
    save_ibs(ibs, out)
    _emit({"points": len(ibs), "out": str(out), "seed": args.run.seed}, None)
    return 0


def cmd_train_field(args: argparse.Namespace, cfg: NiftConfig) -> int:
    target_kind = TargetKind(args.target)
    training = _update(cfg.training, epochs=args.epochs, lr=args.lr, seed=args.run.seed)
    data_file = Path(args.data) / TRAINING_SET_FILE if args.data else None
    if data_file is not None and data_file.exists():
        train = TrainingSet.load(data_file)
        if train.target_kind != target_kind:
            raise FieldError(f"{data_file} holds {train.target_kind.value} targets, not {target_kind.value}")
        logger.info("Loaded %d training pairs from %s", train.pair_count, data_file)
    else:
        set_config = _update(cfg.training_set, num_objects=args.objects, queries_per_object=args.queries)
        kinds = [ShapeKind(k) for k in args.kinds] if args.kinds else [ShapeKind.MUG, ShapeKind.BOWL, ShapeKind.BOTTLE]
        train = generate_training_set(shape_sampler(kinds), set_config.num_objects, set_config.queries_per_object,
                                      args.run.seed, set_config, target_kind, args.run.threads)
        if data_file is not None:
            train.save(data_file)
    weights = train_field(train, cfg.regressor, training)
    out = _out_path(args, "field.nift")
    weights.save(out)
    meta = weights.metadata
    _emit({"out": str(out), "fingerprint": weights.fingerprint(), "seed": args.run.seed,
           "metadata": meta.model_dump(mode="json")}, None)
    return 0


def cmd_make_template(args: argparse.Namespace, cfg: NiftConfig) -> int:
    template_config = _update(cfg.template, samples=args.samples)
    demos = [load_demo(p) for p in args.demo]
    fields = [load_field(args.field, d.source, cfg.scf, args.run.threads, args.run.seed) for d in demos]
    if len(demos) == 1:
        template = build_template(demos[0], fields[0], template_config, args.run.seed)
    else:
        template = aggregate_templates(demos, fields, args.k, template_config, args.run.seed)
    out = _out_path(args, "template.json")
    template.save(out)
    _emit({"out": str(out), "points": len(template), "fingerprint": template.field_fingerprint,
           "seed": args.run.seed}, None)
    return 0


def cmd_imitate(args: argparse.Namespace, cfg: NiftConfig) -> int:
    optimize = _update(cfg.optimize, restarts=args.restarts, max_iters=args.iters,
                       learning_rate=args.lr, seed=args.run.seed)
    template = InteractionTemplate.load(args.template)
    target = load_geometry(args.target)
    target_field = load_field(args.field, target, cfg.scf, args.run.threads, args.run.seed)
    result = optimize_pose(template, target_field, target, optimize, args.run.threads)
    if args.trace_dir:
        save_trace(result, template, target_field, args.trace_dir, optimize.out_of_domain_weight)
    _emit(result.to_document().model_dump(mode="json"), args.out)
    return 0


def cmd_heatmap(args: argparse.Namespace, cfg: NiftConfig) -> int:
    geom_a = load_geometry(args.object_a)
    geom_b = load_geometry(args.object_b) if args.object_b else geom_a
    field_a = load_field(args.field, geom_a, cfg.scf, args.run.threads, args.run.seed)
    field_b = load_field(args.field, geom_b, cfg.scf, args.run.threads, args.run.seed)
    grid = GridSpec(resolution=args.resolution, slice_axis=args.slice_axis, slice_offset=args.slice_offset)
    out = _out_path(args, "heatmap.ply")
    heatmap = export_heatmap(field_a, args.point, field_b, grid, out)
    _emit({"out": str(out), "points": len(heatmap.points), "argmin": heatmap.argmin.tolist(),
           "min": float(heatmap.values.min()), "max": float(heatmap.values.max())}, None)
    return 0


def cmd_bench(args: argparse.Namespace, cfg: NiftConfig) -> int:
    suite_path = Path(args.suite)
    if not suite_path.exists():
        raise FileNotFoundError(f"Suite file not found: {suite_path}")
    suite = SuiteConfig.model_validate_json(suite_path.read_text(encoding="utf-8"))
    if args.seed is not None:  # an explicit --seed wins over the suite seed
        suite = suite.model_copy(update={"seed": args.seed})
    out_dir = Path(args.run.output_dir or suite_path.parent / f"{suite.name}_report")
    report = run_benchmark(suite, out_dir, args.run.threads, base_dir=suite_path.parent)
    _emit({"out_dir": str(out_dir), "reports": len(report.reports), "checks": report.checks,
           "seed": report.seed, "nif_heldout_mean_r2": report.nif_heldout_mean_r2}, None)
    return 0


def cmd_gen_shapes(args: argparse.Namespace, cfg: NiftConfig) -> int:
    kind = ShapeKind(args.kind)
    out_dir = Path(args.out or args.run.output_dir or "shapes")
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.run.seed)
    task = TaskKind(args.task) if args.task else None
    anchor_file = None
    if task is not None:
        anchor_file = out_dir / f"{anchor_kind(task, kind).value}.obj"
        save_geometry(gen_shape(ShapeSpec(kind=anchor_kind(task, kind))), anchor_file)

    written: List[str] = []
    for i in range(args.count):
        spec = random_spec(kind, rng)
        name = f"{kind.value}_{i:03d}"
        save_geometry(gen_shape(spec), out_dir / f"{name}.obj")
        (out_dir / f"{name}.spec.json").write_text(spec.model_dump_json(indent=2), encoding="utf-8")
        written.append(str(out_dir / f"{name}.obj"))
        if task is not None:
            doc = DemoDocument(anchor=anchor_file.name, source=f"{name}.obj",
                               anchor_pose=demo_anchor_pose(spec, task).to_list())
            (out_dir / f"{name}.demo.json").write_text(doc.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote %d %s shapes to %s", len(written), kind.value, out_dir)
    _emit({"files": written, "seed": args.run.seed}, None)
    return 0


COMMANDS = {
    "scf": cmd_scf,
    "ibs": cmd_ibs,
    "train-field": cmd_train_field,
    "make-template": cmd_make_template,
    "imitate": cmd_imitate,
    "heatmap": cmd_heatmap,
    "bench": cmd_bench,
    "gen-shapes": cmd_gen_shapes,
}


# ── parser ──────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nift", description="Imitate object-object interactions from demonstrations.")
    parser.add_argument("--seed", type=int, help="Master seed (default: NIFT_SEED, else a recorded random value)")
    parser.add_argument("--threads", type=int, help="Worker threads (default: NIFT_THREADS, else CPU count)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging")
    parser.add_argument("-q", "--quiet", action="count", default=0, help="Less logging")
    parser.add_argument("--config", help="JSON file merged over nift_config.json")
    parser.add_argument("--out-dir", help="Directory for outputs without an explicit --out")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scf", help="SCF descriptors of query points")
    p.add_argument("--object", required=True)
    p.add_argument("--points", required=True, help="PLY/OBJ vertices or a JSON list of points")
    p.add_argument("--order", type=int)
    p.add_argument("--dirs", type=int)
    p.add_argument("--scheme", choices=[s.value for s in DirectionScheme])
    p.add_argument("--out")

    p = sub.add_parser("ibs", help="Interaction bisector between two objects")
    p.add_argument("--a", required=True, help="Anchor-side object (importance weights use its distance)")
    p.add_argument("--b", required=True)
    p.add_argument("--samples", type=int, help="Keep an importance-sampled subset")
    p.add_argument("--grid-res", type=int)
    p.add_argument("--tol", type=float, help="Relative equidistance tolerance")
    p.add_argument("--out")

    p = sub.add_parser("train-field", help="Train a descriptor regressor")
    p.add_argument("--data", help="Directory holding (or receiving) the training set")
    p.add_argument("--target", choices=[t.value for t in TargetKind], default=TargetKind.SCF.value)
    p.add_argument("--kinds", nargs="+", choices=[k.value for k in ShapeKind])
    p.add_argument("--objects", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")

    p = sub.add_parser("make-template", help="Build an interaction template")
    p.add_argument("--demo", action="append", required=True, help="Demo JSON (repeat for few-shot)")
    p.add_argument("--field", default="analytic", help="'analytic' or a weight file")
    p.add_argument("--samples", type=int)
    p.add_argument("--k", type=int, help="Neighbours for density weights (default: number of demos)")
    p.add_argument("--out")

    p = sub.add_parser("imitate", help="Optimize the anchor pose on a target")
    p.add_argument("--template", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--field", default="analytic", help="'analytic' or a weight file")
    p.add_argument("--restarts", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--trace-dir", help="Write per-point residuals and restart traces here")
    p.add_argument("--out")

    p = sub.add_parser("heatmap", help="Feature-difference heatmap")
    p.add_argument("--object-a", required=True)
    p.add_argument("--point", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    p.add_argument("--object-b", help="Defaults to object A")
    p.add_argument("--field", default="analytic", help="'analytic' or a weight file")
    p.add_argument("--resolution", type=int, default=24)
    p.add_argument("--slice-axis", type=int, choices=[0, 1, 2])
    p.add_argument("--slice-offset", type=float)
    p.add_argument("--out")

    p = sub.add_parser("bench", help="Run a benchmark suite")
    p.add_argument("--suite", required=True)

    p = sub.add_parser("gen-shapes", help="Write procedural shapes")
    p.add_argument("--kind", required=True, choices=[k.value for k in ShapeKind])
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--task", choices=[t.value for t in TaskKind], help="Also write demo documents for this task")
    p.add_argument("--out", help="Output directory")
    return parser


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    env = get_runtime_config()
    seed = args.seed if args.seed is not None else env["seed"]
    if seed is None:
        seed = int(np.random.SeedSequence().generate_state(1)[0] % 2**31)
        logger.info("No seed given; using %d", seed)
    threads = args.threads or env["threads"] or os.cpu_count() or 1
    return RunConfig(seed=seed, threads=max(1, threads), verbosity=args.verbose - args.quiet,
                     output_dir=args.out_dir)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging(verbosity_to_level(args.verbose, args.quiet))
    try:
        args.run = resolve_run_config(args)
        cfg = load_config(override_path=args.config) if args.config else load_config()
        return COMMANDS[args.command](args, cfg)
    except (NiftError, ValidationError, FileNotFoundError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
