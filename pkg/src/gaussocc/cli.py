"""Command-line entry points.

Exit codes: 0 success, 1 invalid input (config, file or argument), 2 numerical
failure (non-finite values or a failed gradient check).  Every output file is a
function of the arguments, config and seed; wall-clock times are only written
when ``--timing`` is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import gradcheck as gc
from . import io, report
from .config import ConfigError, ModelConfig, config_hash, load_config, save_config, to_ini
from .numerics import NumericalError, make_rng
from .scene import VoxelGrid, argmax_labels

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; here that code means a numerical failure."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _config(path) -> ModelConfig:
    cfg = load_config(path) if path else ModelConfig()
    cfg.validate()
    return cfg


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def scene_dirs(root):
    if not os.path.isdir(root):
        raise UsageError(f"scene directory {root!r} does not exist")
    names = sorted(n for n in os.listdir(root) if os.path.isfile(os.path.join(root, n, "scene.json")))
    if not names:
        raise UsageError(f"no scenes found under {root!r}")
    return [(n, os.path.join(root, n)) for n in names]


def load_samples(root):
    from .training import make_sample

    return [(n, make_sample(io.read_scene(d))) for n, d in scene_dirs(root)]


def _check_grid(cfg: ModelConfig, samples):
    from .model import grid_spec

    spec = grid_spec(cfg)
    for name, s in samples:
        g = s.scene.spec.grid
        if tuple(g.shape) != tuple(spec.shape) or g.voxel_size != spec.voxel_size or \
                tuple(g.origin) != tuple(spec.origin):
            raise UsageError(f"scene {name} grid does not match the config grid")
        if s.scene.spec.num_classes != cfg.num_classes:
            raise UsageError(f"scene {name} has {s.scene.spec.num_classes} classes, config has {cfg.num_classes}")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_generate(args):
    from .model import grid_spec
    from .synthetic import degrade, generate_scene, random_scene_spec

    cfg = _config(args.config)
    if args.count < 1:
        raise UsageError("--count must be positive")
    spec = grid_spec(cfg)
    rng = make_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        sspec = random_scene_spec(rng, spec, cfg.num_classes)
        scene = generate_scene(sspec, int(rng.integers(2**31)))
        if args.degrade:
            scene = degrade(scene, args.degrade, args.severity, int(rng.integers(2**31)))
        io.write_scene(os.path.join(args.out, f"scene_{i:04d}"), scene)
        if args.figures:
            report.plot_slices(scene.labels, os.path.join(args.out, f"scene_{i:04d}", "slices.png"))
    print(f"wrote\t{args.count}\tscenes\t{args.out}")
    return EXIT_OK


def _metric_record(cfg, metrics, steps, wall, timing, **extra):
    from .training import metric_record

    return metric_record(cfg, metrics, steps, wall, deterministic=not timing, **extra)


def cmd_train(args):
    from .training import TrainState, evaluate, train

    if args.resume:
        state, cfg = io.read_checkpoint(args.resume)
        if args.config:
            other = _config(args.config)
            if config_hash(other) != config_hash(cfg):
                raise UsageError("--config differs from the checkpoint's config")
    else:
        cfg = _config(args.config)
        state = TrainState.create(cfg)
    samples = load_samples(args.scenes)
    _check_grid(cfg, samples)
    steps = cfg.optim.steps - state.step if args.steps is None else args.steps
    if steps < 0:
        raise UsageError("checkpoint is already past the configured step count")
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()

    def progress(st, loss):
        if args.log_every and st.step % args.log_every == 0:
            _log(f"step {st.step} loss {loss:.4f}")

    state, hist = train(cfg, [s for _, s in samples], steps, state, callback=progress)
    wall = time.perf_counter() - t0
    io.write_checkpoint(os.path.join(args.out, "checkpoint.ckpt"), state, cfg)
    save_config(cfg, os.path.join(args.out, "config.ini"))
    start = state.step - len(hist)
    report.write_text(os.path.join(args.out, "losses.tsv"),
                      report.tsv(("step", "loss"), [(start + i, repr(float(v))) for i, v in enumerate(hist)]))
    if hist:
        report.plot_loss_curve(hist, os.path.join(args.out, "loss_curve.png"))
    ev = load_samples(args.eval_scenes) if args.eval_scenes else samples
    _check_grid(cfg, ev)
    metrics = evaluate(state.params, cfg, [s for _, s in ev])
    rec = _metric_record(cfg, metrics, state.step, wall, args.timing)
    report.write_json(os.path.join(args.out, "metrics.json"), rec)
    sys.stdout.write(report.iou_table(metrics))
    return EXIT_OK


def _predict_grids(ckpt, scenes):
    from .model import grid_spec, predict

    state, cfg = io.read_checkpoint(ckpt)
    samples = load_samples(scenes)
    _check_grid(cfg, samples)
    spec = grid_spec(cfg)
    out = []
    for name, s in samples:
        logits, labels = predict(state.params, cfg, s.inputs)
        out.append((name, s, VoxelGrid(spec, logits, labels)))
    return cfg, out


def cmd_predict(args):
    _, grids = _predict_grids(args.checkpoint, args.scenes)
    os.makedirs(args.out, exist_ok=True)
    for name, s, grid in grids:
        io.write_voxel_grid(os.path.join(args.out, f"{name}.vox"), grid)
        if args.figures:
            report.plot_slices(s.labels, os.path.join(args.out, f"{name}.png"), pred=grid.labels)
    print(f"wrote\t{len(grids)}\tpredictions\t{args.out}")
    return EXIT_OK


def cmd_eval(args):
    from . import losses

    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("give exactly one of --checkpoint or --predictions")
    preds, gts, num_classes = [], [], None
    if args.checkpoint:
        cfg, grids = _predict_grids(args.checkpoint, args.scenes)
        num_classes = cfg.num_classes
        for _, s, grid in grids:
            preds.append(grid.labels.ravel())
            gts.append(np.asarray(s.labels).ravel())
    else:
        for name, d in scene_dirs(args.scenes):
            gt = io.read_voxel_grid(os.path.join(d, "labels.vox"))
            path = os.path.join(args.predictions, f"{name}.vox")
            if not os.path.exists(path):
                raise UsageError(f"no prediction for scene {name}")
            pr = io.read_voxel_grid(path)
            if pr.logits.shape != gt.logits.shape:
                raise UsageError(f"prediction for {name} has the wrong shape")
            num_classes = gt.num_classes
            preds.append((pr.labels if pr.labels is not None else argmax_labels(pr.logits)).ravel())
            gts.append(gt.labels.ravel())
    pred, gt = np.concatenate(preds), np.concatenate(gts)
    classes = losses.default_classes(num_classes, args.include_empty)
    metrics = {"classes": classes, "iou": losses.class_ious(pred, gt, classes).tolist(),
               "miou": losses.miou(pred, gt, classes)}
    sys.stdout.write(report.iou_table(metrics))
    if args.out:
        report.write_json(args.out, {"iou": metrics["iou"], "miou": metrics["miou"],
                                     "classes": classes, "scenes": len(preds)})
    return EXIT_OK


def parse_seeds(text: str):
    """``"0:10"`` (half-open range) or a comma list such as ``"0,3,7"``."""
    try:
        if ":" in text:
            a, b = text.split(":")
            seeds = list(range(int(a), int(b)))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def cmd_ablate(args):
    from .training import ABLATIONS, ablation_config, run_ablation

    base = _config(args.config)
    names = [n.strip() for n in args.configs.split(",") if n.strip()]
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise UsageError(f"unknown ablation(s): {', '.join(unknown)}; choose from {', '.join(ABLATIONS)}")
    seeds = parse_seeds(args.seeds)
    steps = base.optim.steps if args.steps is None else args.steps
    base = base if steps == base.optim.steps else _with_steps(base, steps)
    os.makedirs(args.out, exist_ok=True)
    rows_path = os.path.join(args.out, "rows.jsonl")
    save_config(base, os.path.join(args.out, "base.ini"))
    existing = report.read_rows(rows_path)
    done = {(r["config"], r["seed"]) for r in existing
            if r["steps"] == steps and r["config_hash"] == config_hash(ablation_config(base, r["config"], r["seed"]))}
    if not args.report_only:
        t0 = time.perf_counter()

        def log(row, res):
            report.append_row(rows_path, row)
            _log(f"{row['config']}\tseed {row['seed']}\tmiou {row['miou']:.4f}\tnight {row['miou_night']:.4f}"
                 f"\t{time.perf_counter() - t0:.0f}s")

        run_ablation(base, names, seeds, steps, night=args.night, log=log, skip=done)
    rows = [r for r in report.read_rows(rows_path) if r["config"] in names and r["seed"] in seeds]
    if not rows:
        raise UsageError("no ablation rows to report")
    report.write_ablation_report(rows, args.out)
    sys.stdout.write(report.summary_table(rows))
    sys.stdout.write("\n")
    sys.stdout.write(report.comparison_table(rows))
    return EXIT_OK


def _with_steps(cfg, steps):
    from .config import with_overrides

    return with_overrides(cfg, **{"optim.steps": steps})


def cmd_export_grid(args):
    grid = io.read_voxel_grid(args.grid)
    text = io.export_grid_text(grid, include_empty=args.include_empty)
    if args.out:
        report.write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args):
    names = [n.strip() for n in args.ops.split(",")] if args.ops else list(gc.OP_CASES)
    unknown = [n for n in names if n not in gc.OP_CASES]
    if unknown:
        raise UsageError(f"unknown op(s): {', '.join(unknown)}")
    results = gc.run_suite(range(args.seeds), names, e2e_seeds=() if args.no_e2e else (0,))
    rows = []
    for name in dict.fromkeys(r.name for r in results):
        rs = [r for r in results if r.name == name]
        worst = max(rs, key=lambda r: r.worst)
        rows.append((name, len(rs), worst.worst, worst.tol, "pass" if all(r.ok for r in rs) else "FAIL"))
    text = report.tsv(("op", "cases", "worst_rel_error", "tol", "status"), rows)
    sys.stdout.write(text)
    if args.out:
        report.write_text(args.out, text)
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


def cmd_config(args):
    """Print (or write) the default config, so runs can start from a file."""
    cfg = _config(args.config)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        save_config(cfg, args.out)
    else:
        sys.stdout.write(to_ini(cfg))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="gaussocc", description="Gaussian occupancy toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="write synthetic scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--degrade", choices=("rain", "night"))
    s.add_argument("--severity", type=float, default=1.0)
    s.add_argument("--figures", action="store_true", help="also write label slice PNGs")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="train on a scene directory")
    s.add_argument("--scenes", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--eval-scenes")
    s.add_argument("--log-every", type=int, default=0)
    s.add_argument("--timing", action="store_true", help="record wall time (output no longer reproducible)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-class IoU table")
    s.add_argument("--scenes", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--predictions", help="directory of .vox files written by predict")
    s.add_argument("--include-empty", action="store_true")
    s.add_argument("--out", help="metric record (JSON)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="write predicted voxel grids")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--figures", action="store_true")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("ablate", help="run the ablation matrix (resumable)")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--configs", default="full,fusion_add,fusion_concat,no_ldfa,no_ebfs,no_mamba,no_lidar,ng_half")
    s.add_argument("--seeds", default="0:10")
    s.add_argument("--steps", type=int)
    s.add_argument("--night", type=float, default=1.0)
    s.add_argument("--report-only", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("export-grid", help="voxel grid to 'x y z label' text")
    s.add_argument("--grid", required=True)
    s.add_argument("--out")
    s.add_argument("--include-empty", action="store_true")
    s.set_defaults(func=cmd_export_grid)

    s = sub.add_parser("gradcheck", help="finite-difference suite")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--ops", help="comma list (default: all)")
    s.add_argument("--no-e2e", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("config", help="print or write a config file")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (ConfigError, io.FormatError, UsageError, OSError, ValueError, json.JSONDecodeError) as exc:
        _log(f"error: {exc}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
