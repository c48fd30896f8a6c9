"""``groklab`` command line.

Exit codes: 0 success, 1 run failure, 2 usage error (unknown flag, bad
value), 3 malformed or inconsistent config, 4 missing input file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import composite_images, coverage, dynamics
from .config import ConfigError, RunConfig, run_config_from_dict
from .report import render_svg
from .rng import env_seed, make_rng
from .tensor_engine import save_tensor
from .trainer import MemorizationSnapshot, MetricsSink, detect_grokking, read_metrics_csv, train
from .zp_dataset import (
    DatasetSplit,
    EmptyTrainError,
    TaskSpec,
    build_split,
    class_partition,
    split_spec_from_dict,
    split_spec_to_dict,
)

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3, 4

log = logging.getLogger("groklab")


class MissingInput(FileNotFoundError):
    pass


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")
    return path


def _resolve(out_dir: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out_dir / p


def _existing(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(f"no such file: {path}")
    return path


# ------------------------------------------------------------ shared flags


def _add_task_flags(ap: argparse.ArgumentParser) -> None:
    g = ap.add_argument_group("task")
    g.add_argument("--p", type=int, help="prime modulus")
    g.add_argument("--f", dest="f", help="polynomial in i, j (default i+j)")
    g.add_argument("--offset", type=int, help="token offset of the second operand")


def _add_split_flags(ap: argparse.ArgumentParser) -> None:
    g = ap.add_argument_group("split")
    g.add_argument("--split", choices=("random", "square", "strip"))
    g.add_argument("--frac", type=float)
    g.add_argument("--k", type=int, help="square reserve bound (inclusive)")
    g.add_argument("--t", type=int, help="strip reserve bound (inclusive)")
    g.add_argument("--seed", type=int)


def _config_dict(args) -> dict:
    """Config JSON (if any) with command-line flags layered on top."""
    d: dict = {}
    if getattr(args, "config", None):
        path = _existing(Path(args.config))
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
    task = dict(d.get("task", {}))
    for flag, key in (("p", "p"), ("f", "f"), ("offset", "offset")):
        v = getattr(args, flag, None)
        if v is not None:
            task[key] = v
            if key == "f":
                task.pop("terms", None)
    d["task"] = task
    split = dict(d.get("split", {}))
    for key in ("frac", "k", "t", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            split[key] = v
    if getattr(args, "split", None):
        split["kind"] = args.split
    d["split"] = split
    return d


def _task_and_split(args) -> tuple[TaskSpec, object]:
    cfg = run_config_from_dict({k: v for k, v in _config_dict(args).items() if k in ("task", "split")})
    spec = cfg.split
    seed = env_seed(-1)
    if seed >= 0:
        spec = split_spec_from_dict({**split_spec_to_dict(spec), "seed": seed})
    return cfg.task, spec


# ------------------------------------------------------------ commands


def cmd_dataset_zp(args, out_dir: Path) -> int:
    task, spec = _task_and_split(args)
    split = build_split(task, spec)
    path = _resolve(out_dir, args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    split.save(path)
    print(f"wrote {path} (train {len(split.train)}, test {len(split.test)})")
    return EXIT_OK


def cmd_dataset_composite(args, out_dir: Path) -> int:
    seed = env_seed(args.seed)
    if args.dict_dir:
        dictionary = composite_images.load_dictionary(_existing(Path(args.dict_dir)), args.n)
    else:
        dictionary = composite_images.generate_dictionary(args.n, args.image_size, seed)
    target = _resolve(out_dir, args.out)
    res = composite_images.generate_dataset(dictionary, target, args.split_frac, seed, raw_sidecar=args.raw_sidecar)
    print(f"wrote {res.n_samples} samples ({res.n_train} train) to {res.out_dir}")
    return EXIT_OK


def cmd_coverage(args, out_dir: Path) -> int:
    if args.split_file:
        split = DatasetSplit.load(_existing(_resolve(out_dir, args.split_file)))
    else:
        task, spec = _task_and_split(args)
        split = build_split(task, spec)
    cfg = coverage.CoverageConfig(args.radius, args.metric)
    doc = coverage.coverage_report(split, cfg).to_dict()
    if args.d1:
        classes = class_partition(split.task)
        doc["condition_i"] = [
            coverage.condition_i_report(split, classes, D1, args.metric).to_dict() for D1 in args.d1
        ]
    if args.mc_trials:
        mean, sem = coverage.monte_carlo_expected_prop(
            split.p, doc["alpha_threshold"], args.radius, args.metric, trials=args.mc_trials, seed=env_seed(0)
        )
        doc["monte_carlo_at_alpha"] = {"trials": args.mc_trials, "mean_prop": mean, "sem": sem}
    path = _write_json(_resolve(out_dir, args.out), doc)
    print(f"wrote {path} (C={doc['C']}, prop={doc['prop']:.4f})")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    d = _config_dict(args)
    model = dict(d.get("model", {}))
    for flag, key in (("d_model", "d_model"), ("n_heads", "n_heads"), ("n_layers", "n_layers"), ("d_mlp", "d_mlp")):
        v = getattr(args, flag)
        if v is not None:
            model[key] = v
    if args.layer_norm:
        model["use_layer_norm"] = True
    if args.no_causal:
        model["causal_mask"] = False
    d["model"] = model
    tr = dict(d.get("train", {}))
    for key in ("lr", "weight_decay", "epochs", "batch_size", "eval_every", "stop_test_acc"):
        v = getattr(args, key)
        if v is not None:
            tr[key] = v
    if args.seed is not None:
        tr["seed"] = args.seed
    init = dict(tr.get("init", {}))
    if args.init:
        init["kind"] = args.init
    if args.init_std is not None:
        init["std"] = args.init_std
    if init:
        tr["init"] = init
    d["train"] = tr
    rep = dict(d.get("report", {}))
    if args.log_x:
        rep["log_x"] = True
    if args.raw_med:
        rep["raw_med"] = True
    d["report"] = rep
    if args.output_dir:
        d["output_dir"] = args.output_dir
    return run_config_from_dict(d).with_env_seed()


def cmd_train(args, out_dir: Path) -> int:
    cfg = _run_config(args)
    if args.dry_run:
        sys.stdout.write(cfg.to_json())
        return EXIT_OK
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config.json", cfg.to_dict())
    split = build_split(cfg.task, cfg.split)
    split.save(out_dir / "split.json")

    def progress(row):
        if row.epoch % (cfg.train.eval_every * 100) == 0:
            log.info(
                "epoch %d train_acc %.4f test_acc %.4f test_loss %.4f med %.4f",
                row.epoch, row.train_acc, row.test_acc, row.test_loss, row.med,
            )

    snap = MemorizationSnapshot(cfg.task.p)
    with MetricsSink(out_dir / "metrics.csv", out_dir / "metrics.jsonl") as sink:
        result = train(
            split, cfg.model, cfg.train, sink=sink, checkpoint_dir=out_dir / "checkpoint", callback=progress, on_eval=snap
        )
    _write_json(out_dir / "grokking.json", result.report.to_dict())
    if snap.rows is not None and snap.epoch == result.report.memorization_epoch:
        save_tensor(out_dir / "embedding_memorization.bin", snap.rows)
    (out_dir / "report.svg").write_text(
        render_svg(result.metrics, log_x=cfg.report.log_x, med_scale=cfg.task.p if cfg.report.raw_med else 1.0,
                   med_label="MED (raw sum)" if cfg.report.raw_med else "MED")
    )
    print(json.dumps(result.report.to_dict()))
    if result.diverged:
        print("training diverged; partial metrics kept", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_dynamics(args, out_dir: Path) -> int:
    if args.random:
        starts = make_rng(env_seed(args.seed), "misc").uniform(0.0, 1.0, size=(args.random, 3))
    else:
        starts = np.array([[args.x, args.w, args.u]])
    traj = dynamics.integrate(starts, args.delta, args.h, args.t_end)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for k in range(len(starts)):
        path = traj.to_csv(_resolve(out_dir, f"{args.prefix}{k:03d}.csv"), index=k)
        fin = traj.final[k]
        V = traj.V()[:, k]
        summary.append(
            {
                "file": path.name,
                "start": starts[k].tolist(),
                "final": fin.tolist(),
                "final_xwu": float(np.prod(fin)),
                "left_cube": bool(traj.left_cube[k]),
                "max_V_increase": float(np.diff(V).max()) if len(V) > 1 else 0.0,
            }
        )
    path = _write_json(_resolve(out_dir, f"{args.prefix}summary.json"), {"delta": args.delta, "h": args.h, "t_end": args.t_end, "trajectories": summary})
    print(f"wrote {len(starts)} trajectories and {path}")
    return EXIT_OK


def cmd_report(args, out_dir: Path) -> int:
    metrics = _existing(_resolve(out_dir, args.metrics))
    rows = read_metrics_csv(metrics)
    if not rows:
        raise ConfigError(f"{metrics}: no metric rows")
    if args.raw_med and args.p is None:
        raise ValueError("--raw-med needs --p (MED is logged as a mean)")
    svg = render_svg(
        rows,
        log_x=args.log_x,
        med_scale=args.p if args.raw_med else 1.0,
        med_label="MED (raw sum)" if args.raw_med else "MED",
        title=args.title,
    )
    svg_path = _resolve(out_dir, args.out)
    svg_path.parent.mkdir(parents=True, exist_ok=True)
    svg_path.write_text(svg)
    rep = detect_grokking(rows, window=args.window)
    json_path = _write_json(svg_path.with_suffix(".json"), rep.to_dict())
    print(f"wrote {svg_path} and {json_path}")
    return EXIT_OK


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="groklab", description="Grokking laboratory for prime-field arithmetic.")
    ap.add_argument("--output-dir", help="base directory for relative output paths (default: cwd)")
    ap.add_argument("-v", "--verbose", action="store_true")
    # also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-zp", parents=[common], help="build a train/test split and write it as JSON")
    p.add_argument("--config", help="run config JSON (task and split sections are used)")
    _add_task_flags(p)
    _add_split_flags(p)
    p.add_argument("--out", default="split.json")
    p.set_defaults(func=cmd_dataset_zp)

    p = sub.add_parser("dataset-composite", parents=[common], help="generate the composite-image dataset")
    p.add_argument("--n", type=int, default=11, help="dictionary size")
    p.add_argument("--image-size", type=int, default=composite_images.DEFAULT_SIZE, help="quadrant side in pixels")
    p.add_argument("--split-frac", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dict-dir", help="load the dictionary from this directory instead of drawing glyphs")
    p.add_argument("--raw-sidecar", action="store_true", help="also write raw RGB bytes per image")
    p.add_argument("--out", default="composite")
    p.set_defaults(func=cmd_dataset_composite)

    p = sub.add_parser("coverage", parents=[common], help="Manhattan-coverage report of a split")
    p.add_argument("--config")
    _add_task_flags(p)
    _add_split_flags(p)
    p.add_argument("--split-file", help="split JSON from dataset-zp (overrides task/split flags)")
    p.add_argument("--radius", type=int, required=True)
    p.add_argument("--metric", choices=coverage.METRICS, default="torus")
    p.add_argument("--d1", type=int, nargs="*", help="condition-(i) audit radii")
    p.add_argument("--mc-trials", type=int, default=0, help="Monte-Carlo trials at the alpha threshold")
    p.add_argument("--out", default="coverage.json")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("train", parents=[common], help="train a model and stream metrics")
    p.add_argument("--config")
    p.add_argument("--dry-run", action="store_true", help="validate and echo the config, then exit")
    _add_task_flags(p)
    _add_split_flags(p)
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=int)
    g.add_argument("--n-heads", type=int)
    g.add_argument("--n-layers", type=int)
    g.add_argument("--d-mlp", type=int)
    g.add_argument("--layer-norm", action="store_true")
    g.add_argument("--no-causal", action="store_true")
    g = p.add_argument_group("optimisation")
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--stop-test-acc", type=float)
    g.add_argument("--init", choices=("standard", "circulant"))
    g.add_argument("--init-std", type=float)
    g.add_argument("--log-x", action="store_true")
    g.add_argument("--raw-med", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dynamics", parents=[common], help="integrate the reduced three-scalar system")
    p.add_argument("--x", type=float, default=0.5)
    p.add_argument("--w", type=float, default=0.5)
    p.add_argument("--u", type=float, default=0.5)
    p.add_argument("--random", type=int, default=0, help="integrate this many uniform random starts instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=int, choices=(0, 1), default=1)
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--t-end", type=float, default=100.0)
    p.add_argument("--prefix", default="trajectory_")
    p.set_defaults(func=cmd_dynamics)

    p = sub.add_parser("report", parents=[common], help="render a metrics CSV as SVG plus a grokking summary")
    p.add_argument("--metrics", default="metrics.csv")
    p.add_argument("--out", default="report.svg")
    p.add_argument("--log-x", action="store_true")
    p.add_argument("--raw-med", action="store_true")
    p.add_argument("--p", type=int, help="prime, needed by --raw-med")
    p.add_argument("--title")
    p.add_argument("--window", type=int, default=50, help="memorisation window in evals")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)  # exits with 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out_dir = Path(args.output_dir) if args.output_dir else Path(".")
    try:
        return args.func(args, out_dir)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, EmptyTrainError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
