"""Command-line entry point: ``hpsl <command> [flags]``.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
Progress goes to stderr; results go to stdout or files, written atomically.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .archlang import parse_blueprint, read_blueprint, render_blueprint, validate_chain
from .cloud import PointCloud, atomic_write_text, read_cloud, write_cloud
from .datagen import CubeConfig, extract_cubes, make_synthetic_corpus, read_corpus, virtual_scan, write_corpus
from .datagen.corpus import KINDS, Dataset
from .engine import rng_stream
from .neighborhood import Workload, bench_csv, bench_queries
from .network import Network, check_gradients
from .trainer import (
    TrainConfig,
    density_sweep,
    evaluate,
    load_checkpoint,
    metric_log_csv,
    save_checkpoint,
    sweep_csv,
    train,
)


def _threads(value: Optional[int]) -> int:
    return value if value else (os.cpu_count() or 1)


def _json_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = make_synthetic_corpus(args.kind, args.n_per_class, args.points, args.seed, args.n_test_per_class)
    path = write_corpus(ds, args.out)
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test clouds", file=sys.stderr)
    print(path)
    return 0


def cmd_train(args) -> int:
    ds = read_corpus(args.data)
    bp = read_blueprint(args.arch)
    cfg = TrainConfig.from_dict(_json_file(args.config)) if args.config else TrainConfig()
    overrides = {"threads": _threads(args.threads)}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    result = train(bp, ds, cfg, progress=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "model.ckpt")
    atomic_write_text(out / "metrics.csv", result.log_csv())
    print(out / "model.ckpt")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    ds = read_corpus(args.data)
    metrics = evaluate(ck, ds, point_budget=args.budget, fps_seed=args.fps_seed, threads=_threads(args.threads))
    print(json.dumps({k: (None if np.isnan(v) else v) for k, v in metrics.items()}, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    out = run_experiment(args.recipe, out=args.out, threads=_threads(args.threads))
    print(out)
    return 0


def cmd_bench(args) -> int:
    wl = Workload(
        n=args.n,
        density=args.density,
        kind=args.kind,
        param=args.param,
        cap=args.cap,
        repetitions=args.reps,
        n_queries=args.queries,
        seed=args.seed if args.seed is not None else 0,
        threads=_threads(args.threads),
    )
    text = bench_csv(bench_queries(wl))
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_parse_arch(args) -> int:
    bp = read_blueprint(args.file)
    print(render_blueprint(bp))
    if args.validate:
        d, c, k = args.validate
        report = validate_chain(bp, d, c, k)
        print(report.message)
        return 0 if report.ok else 1
    return 0


def cmd_grad_check(args) -> int:
    bp = read_blueprint(args.blueprint)
    seed = args.seed if args.seed is not None else 0
    rng = rng_stream(seed, 0)
    net = Network(bp, args.d, args.c, args.classes, seed=seed)
    segmentation = bp.head.value == "segmentation"
    clouds = []
    for j in range(args.batch):
        x = rng.uniform(-1, 1, (args.points, args.d))
        f = rng.normal(size=(args.points, args.c)) if args.c else None
        labels = rng.integers(0, args.classes, args.points) if segmentation else None
        clouds.append(PointCloud(x, f, labels))
    plan = net.plan(clouds, [int(rng.integers(args.points)) for _ in clouds])
    labels = np.concatenate([c.labels for c in clouds]) if segmentation else rng.integers(0, args.classes, args.batch)
    report = check_gradients(net, plan, labels, seed, args.max_per_param, args.tolerance)
    print(f"max relative error {report.max_rel_error:.3e} over {report.n_checked} entries (worst: {report.worst_param})")
    return 0 if report.passed(args.tolerance) else 1


def cmd_scan(args) -> int:
    scene = read_cloud(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for k, scan in enumerate(virtual_scan(scene, args.cameras)):
        entry = {"heading": list(scan.camera.heading), "points": 0 if scan.empty else scan.cloud.n, "empty": scan.empty}
        if not scan.empty:
            write_cloud(scan.cloud, out / f"scan_{k}.pcl")
            entry["file"] = f"scan_{k}.pcl"
        summary.append(entry)
    atomic_write_text(out / "scans.json", json.dumps(summary, indent=2) + "\n")
    print(f"{sum(not s['empty'] for s in summary)} non-empty scans", file=sys.stderr)
    return 0


def cmd_cubes(args) -> int:
    scene = read_cloud(args.scene)
    seed = args.seed if args.seed is not None else 0
    cfg = CubeConfig(target_n=args.points)
    cubes = extract_cubes(scene, cfg, rng_stream(seed, 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for k, cube in enumerate(cubes):
        write_cloud(cube.cloud, out / f"cube_{k}.pcl")
        index.append({"file": f"cube_{k}.pcl", "origin": cube.origin.tolist(), "point_indices": cube.point_indices.tolist()})
    atomic_write_text(out / "cubes.json", json.dumps(index) + "\n")
    print(f"{len(cubes)} qualifying cubes", file=sys.stderr)
    return 0


# -- experiments -------------------------------------------------------------------------

RECIPE_KEYS = {"name", "corpus", "variants", "config", "budgets", "seeds", "out"}
CORPUS_KEYS = {"kind", "n_per_class", "n_test_per_class", "points", "seed"}
VARIANT_KEYS = {"arch", "dropout_training"}


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ValueError(f"{where}: expected a JSON object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ValueError(f"{where}: unknown key(s): {', '.join(unknown)}")


def load_recipe(path) -> dict:
    """Parse and validate a recipe, resolving every referenced file.

    All checks happen here, before any training starts.
    """
    path = Path(path)
    recipe = _json_file(path)
    base = path.parent
    _check_keys(recipe, RECIPE_KEYS, "recipe")
    for key in ("corpus", "variants", "budgets"):
        if key not in recipe:
            raise ValueError(f"recipe: missing required key {key!r}")
    corpus = recipe["corpus"]
    if isinstance(corpus, str):
        manifest = _resolve(base, corpus)
        if manifest.is_dir():
            manifest = manifest / "manifest.json"
        if not manifest.exists():
            raise FileNotFoundError(f"recipe references a missing corpus: {manifest}")
        corpus = str(manifest)
    else:
        _check_keys(corpus, CORPUS_KEYS, "recipe.corpus")
        if corpus.get("kind") not in KINDS:
            raise ValueError(f"recipe.corpus.kind must be one of {', '.join(KINDS)}")
    config = recipe.get("config", {})
    if isinstance(config, str):
        cpath = _resolve(base, config)
        if not cpath.exists():
            raise FileNotFoundError(f"recipe references a missing config: {cpath}")
        config = _json_file(cpath)
    TrainConfig.from_dict(config)
    variants = {}
    if not isinstance(recipe["variants"], dict) or not recipe["variants"]:
        raise ValueError("recipe.variants must be a non-empty object")
    for name, spec in recipe["variants"].items():
        _check_keys(spec, VARIANT_KEYS, f"recipe.variants.{name}")
        if "arch" not in spec:
            raise ValueError(f"recipe.variants.{name}: missing 'arch'")
        arch = spec["arch"]
        apath = _resolve(base, arch)
        if arch.endswith(".arch"):
            if not apath.exists():
                raise FileNotFoundError(f"recipe references a missing blueprint: {apath}")
            bp = read_blueprint(apath)
        else:
            bp = parse_blueprint(arch)
        variants[name] = {"blueprint": bp, "dropout_training": bool(spec.get("dropout_training", False))}
    budgets = [int(b) for b in recipe["budgets"]]
    seeds = [int(s) for s in recipe.get("seeds", [0])]
    if not seeds:
        raise ValueError("recipe.seeds must not be empty")
    return {
        "name": recipe.get("name", path.stem),
        "corpus": corpus,
        "config": config,
        "variants": variants,
        "budgets": budgets,
        "seeds": seeds,
        "out": _resolve(base, recipe["out"]) if "out" in recipe else None,
        "hash": hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest(),
    }


def _load_corpus(spec) -> Dataset:
    if isinstance(spec, str):
        return read_corpus(spec)
    return make_synthetic_corpus(spec["kind"], spec["n_per_class"], spec["points"], spec.get("seed", 0), spec.get("n_test_per_class"))


def run_experiment(recipe_path, out=None, threads: int = 1) -> Path:
    """Train every variant for every seed, then sweep point budgets.

    Writes checkpoints, per-run metric logs, ``density_sweep.csv`` and a
    reproducibility manifest to the artifacts directory, which is returned.
    """
    recipe = load_recipe(recipe_path)
    out = Path(out) if out is not None else recipe["out"]
    if out is None:
        raise ValueError("no output directory: pass --out or set 'out' in the recipe")
    dataset = _load_corpus(recipe["corpus"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in recipe["seeds"]:
        checkpoints = {}
        for name, var in recipe["variants"].items():
            cfg = TrainConfig.from_dict({**recipe["config"], "seed": seed, "dropout_training": var["dropout_training"], "threads": threads})
            print(f"training {name} (seed {seed})", file=sys.stderr)
            result = train(var["blueprint"], dataset, cfg)
            stem = f"{name.replace('+', '_')}.seed{seed}"
            save_checkpoint(result.checkpoint, out / f"{stem}.ckpt")
            atomic_write_text(out / f"{stem}.metrics.csv", metric_log_csv(result.log))
            checkpoints[name] = result.checkpoint
        for row in density_sweep(checkpoints, dataset, recipe["budgets"], threads=threads):
            rows.append({**row, "seed": seed})
    atomic_write_text(out / "density_sweep.csv", sweep_csv(rows))
    manifest = {
        "recipe": str(recipe_path),
        "recipe_sha256": recipe["hash"],
        "seeds": recipe["seeds"],
        "variants": {k: render_blueprint(v["blueprint"]) for k, v in recipe["variants"].items()},
        "budgets": recipe["budgets"],
        "versions": {"hpsl": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


# -- parser ------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hpsl", description="Hierarchical point-set learning toolkit.")
    parser.add_argument("--version", action="version", version=f"hpsl {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=None, help="seed for all randomness")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        p.set_defaults(func=func)
        return p

    p = command("gen-data", cmd_gen_data, "generate a synthetic corpus")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-per-class", type=int, default=200, help="training clouds per class (scenes for room-scenes)")
    p.add_argument("--n-test-per-class", type=int, default=None, help="test clouds per class (default: half)")
    p.add_argument("--points", type=int, default=128, help="points per cloud")
    p.set_defaults(seed=0)

    p = command("train", cmd_train, "train a network on a corpus")
    p.add_argument("--data", required=True, help="corpus directory or manifest")
    p.add_argument("--arch", required=True, help="blueprint file")
    p.add_argument("--config", default=None, help="training config JSON")
    p.add_argument("--out", required=True, help="output directory for model.ckpt and metrics.csv")

    p = command("eval", cmd_eval, "evaluate a checkpoint on a corpus test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--budget", type=int, default=None, help="subsample each test cloud to this many points")
    p.add_argument("--fps-seed", type=int, default=None, help="randomize the first FPS index with this seed")

    p = command("sweep", cmd_sweep, "run a density-sweep experiment recipe")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out", default=None, help="artifacts directory (overrides the recipe)")

    p = command("bench-neighbors", cmd_bench, "benchmark grid vs brute-force neighborhood queries")
    p.add_argument("--n", type=int, required=True, help="number of points")
    p.add_argument("--density", choices=("uniform", "radial"), default="uniform")
    p.add_argument("--kind", choices=("ball", "knn"), default="ball")
    p.add_argument("--param", type=float, required=True, help="radius for ball, k for knn")
    p.add_argument("--cap", type=int, default=64, help="ball query cap")
    p.add_argument("--reps", type=int, default=5, help="timed repetitions")
    p.add_argument("--queries", type=int, default=256, help="query centroids")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p = command("parse-arch", cmd_parse_arch, "parse a blueprint and print its canonical form")
    p.add_argument("--file", required=True)
    p.add_argument("--validate", type=int, nargs=3, metavar=("D", "C", "K"), default=None, help="also check widths for these dims")

    p = command("grad-check", cmd_grad_check, "finite-difference check of a network's gradients")
    p.add_argument("--blueprint", required=True)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--c", type=int, default=0)
    p.add_argument("--classes", type=int, default=None, help="default: final blueprint width")
    p.add_argument("--points", type=int, default=32)
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--max-per-param", type=int, default=None, help="check a random subset of entries")
    p.add_argument("--tolerance", type=float, default=1e-5)

    p = command("scan", cmd_scan, "virtual scans of a labeled scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cameras", type=int, default=8)

    p = command("cubes", cmd_cubes, "extract training cubes from a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=8192)
    return parser


def _final_width(bp) -> int:
    last = bp.levels[-1]
    return last.width if hasattr(last, "width") else last.widths[-1]


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help and --version
        return 0 if exc.code in (0, None) else 2
    if getattr(args, "threads", None) is not None and args.threads < 1:
        parser.print_usage(sys.stderr)
        print("hpsl: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        if args.command == "grad-check" and args.classes is None:
            args.classes = _final_width(read_blueprint(args.blueprint))
        return args.func(args)
    except KeyboardInterrupt:
        return 1
    except Exception as exc:
        print(f"hpsl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
