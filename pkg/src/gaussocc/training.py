"""Optimisation, evaluation and the ablation driver."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .config import ModelConfig, config_hash, with_overrides
from .model import (SceneInputs, check_tree_finite, draw_decisions, grid_spec, init_params,
                    loss_and_grads, predict, tree_items, zeros_like_tree)
from .numerics import NumericalError, make_rng
from .scene import normalize_quat
from .synthetic import degrade, generate_scene, random_scene_spec


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if total <= 1:
        return lr
    frac = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * frac))


def decays(path: str) -> bool:
    """Weight decay applies to network matrices, never to Gaussian attributes."""
    return not path.startswith("anchors/")


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ModelConfig) -> "TrainState":
        rng = make_rng(cfg.seed)
        params = init_params(cfg, rng)
        return cls(params, zeros_like_tree(params), zeros_like_tree(params), 0,
                   rng.bit_generator.state)

    def rng(self) -> np.random.Generator:
        rng = make_rng(0)
        rng.bit_generator.state = self.rng_state
        return rng


def adamw_update(state: TrainState, grads, lr: float, cfg: ModelConfig):
    """One decoupled-weight-decay Adam step applied in place."""
    oc = cfg.optim
    t = state.step + 1
    c1 = 1.0 - oc.beta1**t
    c2 = 1.0 - oc.beta2**t
    pitems = dict(tree_items(state.params))
    mitems = dict(tree_items(state.m))
    vitems = dict(tree_items(state.v))
    for path, g in tree_items(grads):
        p, m, v = pitems[path], mitems[path], vitems[path]
        g = np.asarray(g, dtype=float)
        m *= oc.beta1
        m += (1.0 - oc.beta1) * g
        v *= oc.beta2
        v += (1.0 - oc.beta2) * g * g
        step_lr = lr * (oc.anchor_lr_scale if path.startswith("anchors/") else 1.0)
        if decays(path) and oc.weight_decay:
            p *= 1.0 - step_lr * oc.weight_decay
        p -= step_lr * (m / c1) / (np.sqrt(v / c2) + oc.eps)
        if path == "anchors/quats":
            p[...] = normalize_quat(p)      # rotations stay unit after every write
    state.step = t


def train_step(state: TrainState, cfg: ModelConfig, inputs: SceneInputs, labels):
    """Forward, backward and one AdamW update; returns the pre-update loss."""
    rng = state.rng()
    decisions = draw_decisions(cfg, rng, train=True)
    state.rng_state = rng.bit_generator.state
    loss, grads, _, _ = loss_and_grads(state.params, cfg, inputs, labels, decisions)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss at step {state.step}")
    check_tree_finite(grads, "gradient")
    lr = cosine_lr(state.step, cfg.optim.steps, cfg.optim.lr, cfg.optim.lr_min)
    adamw_update(state, grads, lr, cfg)
    return loss


# --------------------------------------------------------------------------
# fixtures
# --------------------------------------------------------------------------

@dataclass
class Sample:
    inputs: SceneInputs
    labels: np.ndarray
    scene: object = None


def make_sample(scene) -> Sample:
    return Sample(SceneInputs.from_scene(scene), scene.labels, scene)


@dataclass
class Fixture:
    train: list
    eval: list


def make_fixture(cfg: ModelConfig, seed: int, train_scenes: int = 32, eval_scenes: int = 8,
                 night_fraction: float = 0.25) -> Fixture:
    """Seeded train/eval scene pools; a fraction of training scenes get night noise
    of random severity, mirroring sensors of mixed reliability."""
    spec = grid_spec(cfg)
    rng = make_rng(10_000 + seed)
    train, ev = [], []
    for i in range(train_scenes + eval_scenes):
        sspec = random_scene_spec(rng, spec, cfg.num_classes)
        scene = generate_scene(sspec, int(rng.integers(2**31)))
        if i < train_scenes:
            if rng.random() < night_fraction:
                scene = degrade(scene, "night", float(rng.uniform(0.3, 1.0)), int(rng.integers(2**31)))
            train.append(make_sample(scene))
        else:
            ev.append(make_sample(scene))
    return Fixture(train, ev)


# --------------------------------------------------------------------------
# training and evaluation
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    config: ModelConfig
    state: TrainState
    losses: list
    metrics: dict
    wall_time: float


def train(cfg: ModelConfig, samples, steps: int | None = None, state: TrainState | None = None,
          callback=None):
    """Train on ``samples`` drawn uniformly with the state's stream.  Returns ``(state, losses)``."""
    steps = cfg.optim.steps if steps is None else steps
    state = state or TrainState.create(cfg)
    hist = []
    for _ in range(steps):
        rng = state.rng()
        idx = int(rng.integers(len(samples)))
        state.rng_state = rng.bit_generator.state
        s = samples[idx]
        hist.append(train_step(state, cfg, s.inputs, s.labels))
        if callback is not None:
            callback(state, hist[-1])
    return state, hist


def evaluate(params, cfg: ModelConfig, samples, include_empty: bool = False):
    """Pooled per-class IoU and mIoU over all samples (confusion summed first)."""
    classes = losses.default_classes(cfg.num_classes, include_empty)
    preds, gts = [], []
    for s in samples:
        _, lab = predict(params, cfg, s.inputs)
        preds.append(lab.ravel())
        gts.append(np.asarray(s.labels).ravel())
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    ious = losses.class_ious(pred, gt, classes)
    return {"classes": classes, "iou": ious.tolist(), "miou": losses.miou(pred, gt, classes)}


def metric_record(cfg: ModelConfig, metrics: dict, steps: int, wall_time: float,
                  deterministic: bool = True, **extra) -> dict:
    rec = {"config_hash": config_hash(cfg), "iou": metrics["iou"], "miou": metrics["miou"],
           "classes": metrics["classes"], "steps": steps,
           "wall_time": 0.0 if deterministic else wall_time}
    rec.update(extra)
    return rec


def run(cfg: ModelConfig, fixture: Fixture, steps: int | None = None) -> RunResult:
    t0 = time.perf_counter()
    state, hist = train(cfg, fixture.train, steps)
    metrics = evaluate(state.params, cfg, fixture.eval)
    return RunResult(cfg, state, hist, metrics, time.perf_counter() - t0)


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

ABLATIONS = {
    # name -> dotted overrides relative to the base config
    "full": {},
    "fusion_add": {"fusion.mode": "add"},
    "fusion_concat": {"fusion.mode": "concat"},
    "no_ldfa": {"lift.use_ldfa": False},
    "no_ebfs": {"smooth.enabled": False},
    "no_mamba": {"head.use_scan": False},
    "no_lidar": {"lift.use_lidar": False},
    "ng_half": "half",
}


def ablation_config(base: ModelConfig, name: str, seed: int) -> ModelConfig:
    over = ABLATIONS[name]
    if over == "half":
        over = {"num_gaussians": base.num_gaussians // 2}
    return with_overrides(base, seed=seed, **over)


def night_samples(fixture: Fixture, severity: float = 1.0):
    """Held-out scenes with the camera degraded to night conditions."""
    return [make_sample(degrade(s.scene, "night", severity, 77 + i)) for i, s in enumerate(fixture.eval)]


def ablation_row(name: str, seed: int, cfg: ModelConfig, res: RunResult, night_metrics: dict,
                 curve_every: int = 10) -> dict:
    return {"config": name, "seed": seed, "num_gaussians": cfg.num_gaussians,
            "miou": res.metrics["miou"], "iou": res.metrics["iou"],
            "miou_night": night_metrics["miou"], "iou_night": night_metrics["iou"],
            "final_loss": float(np.mean(res.losses[-20:])), "steps": len(res.losses),
            "loss_curve": [float(x) for x in res.losses[::curve_every]],
            "config_hash": config_hash(cfg)}


def run_ablation(base: ModelConfig, names, seeds, steps: int | None = None, night: float = 1.0,
                 log=None, skip=()):
    """Train every (config, seed) pair on the seed's fixture and evaluate clean and
    night-degraded held-out scenes.  Pairs listed in ``skip`` are not rerun.
    Returns the list of new row dicts."""
    rows = []
    skip = set(skip)
    for seed in seeds:
        todo = [n for n in names if (n, seed) not in skip]
        if not todo:
            continue
        fixture = make_fixture(base, seed)
        night_eval = night_samples(fixture, night)
        for name in todo:
            cfg = ablation_config(base, name, seed)
            res = run(cfg, fixture, steps)
            row = ablation_row(name, seed, cfg, res, evaluate(res.state.params, cfg, night_eval))
            rows.append(row)
            if log is not None:
                log(row, res)
    return rows
