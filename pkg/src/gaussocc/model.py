"""The full occupancy model: lifting, smoothing, fusion, refinement, splatting.

Parameters live in a nested dict (``params``) whose leaves are arrays;
gradients come back in the same layout.  Every stochastic or discrete choice
made during a forward pass (chunk permutation, smoothing-layer selection,
Morton order, splat support) is carried in a :class:`Decisions` record so a
pass can be replayed exactly, which is what the gradient checker relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import aclf, ebfs, ldfa, losses, mamba
from .config import ModelConfig
from .numerics import NumericalError, spawn_rng
from .scene import (GaussianSet, GridSpec, argmax_labels, init_refine_params, refine_block,
                    refine_block_backward, splat, splat_backward)
from .synthetic import CAMERA_CHANNELS

ANCHOR_KEYS = ("means", "quats", "log_scales", "opacity_logits", "logits", "features")


@dataclass
class SceneInputs:
    """Sensor inputs prepared once per scene (channel-last copies cached)."""

    volume: ldfa.FeatureVolume
    camera: ldfa.CameraFeatureMap

    def __post_init__(self):
        self.planes = self.volume.planes()
        self.image = self.camera.channel_last()

    @classmethod
    def from_scene(cls, scene) -> "SceneInputs":
        return cls(scene.volume, scene.camera)


@dataclass
class Decisions:
    plan: ldfa.ChunkPlan
    selection: np.ndarray
    order: tuple | None = None
    pairs: tuple | None = None


def grid_spec(cfg: ModelConfig) -> GridSpec:
    return GridSpec(tuple(cfg.grid.origin), cfg.grid.voxel_size, tuple(cfg.grid.shape))


def smoothing_config(cfg: ModelConfig) -> ebfs.SmoothingConfig:
    return ebfs.SmoothingConfig(cfg.smooth.tau, cfg.smooth.xi, cfg.smooth.p_select)


def draw_decisions(cfg: ModelConfig, rng=None, train: bool = False) -> Decisions:
    plan = ldfa.make_chunk_plan(cfg.lift.depth_planes, cfg.lift.chunks, rng if train else None)
    sel = ebfs.draw_selection(rng, cfg.smooth.layers, smoothing_config(cfg), train)
    return Decisions(plan, sel)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def init_anchors(cfg: ModelConfig, rng):
    spec = grid_spec(cfg)
    N, C, d = cfg.num_gaussians, cfg.num_classes, cfg.feat_dim
    quats = np.zeros((N, 4))
    quats[:, 0] = 1.0
    return {
        "means": rng.uniform(spec.lower, spec.upper, (N, 3)),
        "quats": quats,
        "log_scales": np.full((N, 3), np.log(cfg.grid.voxel_size * cfg.init_scale)),
        "opacity_logits": np.zeros(N),
        "logits": np.zeros((N, C)),
        "features": np.zeros((N, d)),
    }


def init_params(cfg: ModelConfig, rng):
    """Every sub-module gets its own child stream, so toggles never shift the draws."""
    d = cfg.feat_dim
    lc = cfg.lift
    streams = [spawn_rng(rng) for _ in range(9)]
    return {
        "anchors": init_anchors(cfg, streams[0]),
        "cam": ldfa.init_camera_params(streams[1], d, lc.camera_keypoints, lc.camera_ring),
        "ldfa": ldfa.init_ldfa_params(streams[2], d, lc.depth_planes, lc.keypoints,
                                      ldfa.POINT_CHANNELS, lc.att_dim, lc.ring),
        "embed_c": streams[3].normal(0.0, 1.0 / np.sqrt(CAMERA_CHANNELS), (CAMERA_CHANNELS, d)),
        "embed_l": streams[3].normal(0.0, 1.0 / np.sqrt(ldfa.POINT_CHANNELS), (ldfa.POINT_CHANNELS, d)),
        "enc_c": init_refine_params(streams[4], d),
        "enc_l": init_refine_params(streams[5], d),
        "eps": np.zeros(cfg.smooth.layers),
        "fusion": aclf.init_fusion_params(streams[6], d, cfg.fusion.proj_dim or None, cfg.fusion.mode),
        "post": init_refine_params(streams[7], d),
        "head": mamba.init_head_params(streams[8], d, cfg.num_classes, cfg.head),
    }


def tree_items(tree, prefix=""):
    """Flatten nested dict/list params into ``(path, array)`` pairs in a fixed order."""
    if isinstance(tree, dict):
        for k in sorted(tree):
            yield from tree_items(tree[k], f"{prefix}{k}/")
    elif isinstance(tree, list):
        for i, v in enumerate(tree):
            yield from tree_items(v, f"{prefix}{i}/")
    else:
        yield prefix[:-1], tree


def tree_map(fn, tree, *rest):
    if isinstance(tree, dict):
        return {k: tree_map(fn, tree[k], *(r[k] for r in rest)) for k in tree}
    if isinstance(tree, list):
        return [tree_map(fn, v, *(r[i] for r in rest)) for i, v in enumerate(tree)]
    return fn(tree, *rest)


def zeros_like_tree(tree):
    return tree_map(lambda a: np.zeros_like(np.asarray(a, dtype=float)), tree)


def num_parameters(params) -> int:
    return sum(np.size(a) for _, a in tree_items(params))


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def forward(params, cfg: ModelConfig, inputs: SceneInputs, decisions: Decisions):
    """Returns ``(logits (X, Y, Z, C), cache)``."""
    A = params["anchors"]
    means, f = A["means"], A["features"]
    N, d = f.shape
    c = {}
    cam_raw, c["cam"] = ldfa.camera_lift(means, f, inputs.camera, params["cam"], image=inputs.image)
    c["cam_raw"] = cam_raw
    F_C = cam_raw @ params["embed_c"]
    if cfg.lift.use_lidar:
        if cfg.lift.use_ldfa:
            lid_raw, c["lid"] = ldfa.ldfa_lift(means, f, inputs.volume, params["ldfa"],
                                               decisions.plan, planes=inputs.planes)
        else:
            lid_raw, c["lid"] = ldfa.column_mean_lift(means, inputs.volume, planes=inputs.planes)
        c["lid_raw"] = lid_raw
        F_L = lid_raw @ params["embed_l"]
    else:
        F_L = np.zeros((N, d))
    F_C, c["enc_c"] = refine_block(F_C, params["enc_c"])
    F_L, c["enc_l"] = refine_block(F_L, params["enc_l"])
    c["smooth"] = []
    if cfg.smooth.enabled:
        scfg = smoothing_config(cfg)
        for i in range(cfg.smooth.layers):
            F_C, F_L, sc = ebfs.smooth(F_C, F_L, params["eps"][i], scfg, bool(decisions.selection[i]))
            c["smooth"].append(sc)
    F, c["fuse"] = aclf.fuse(F_C, F_L, params["fusion"], cfg.fusion.mode, cfg.fusion.heads)
    G, c["post"] = refine_block(f + F, params["post"])
    spec = grid_spec(cfg)
    arrays = {k: A[k] for k in ANCHOR_KEYS[:-1]}
    arrays["features"] = G
    new, c["head"] = mamba.refine_arrays(arrays, params["head"], cfg.head, spec.lower, spec.upper,
                                         order=decisions.order)
    gset = GaussianSet(new["means"], new["quats"], new["log_scales"], new["opacity_logits"],
                       new["logits"], new["features"])
    logits, c["splat"] = splat(gset, spec, cfg.grid.cutoff, pairs=decisions.pairs, quats=new["quats"])
    c["order"] = (c["head"]["perm"], c["head"]["inv"])
    c["pairs"] = c["splat"]["pairs"]
    c["refined"] = new
    return logits, c


def frozen_decisions(decisions: Decisions, cache) -> Decisions:
    """Same decisions with the order and splat support pinned to a past pass."""
    return Decisions(decisions.plan, decisions.selection, cache["order"], cache["pairs"])


def backward(dlogits, params, cfg: ModelConfig, inputs: SceneInputs, cache):
    """Gradient of a scalar w.r.t. every parameter, given ``dlogits``."""
    grads = zeros_like_tree(params)
    gs = splat_backward(dlogits, cache["splat"])
    hg, darr = mamba.refine_arrays_backward(gs, cache["head"], params["head"])
    grads["head"] = hg
    dG0, grads["post"] = refine_block_backward(darr["features"], cache["post"], params["post"])
    ga = grads["anchors"]
    for k in ANCHOR_KEYS[:-1]:
        ga[k] = darr[k]
    ga["features"] = dG0.copy()
    dF_C, dF_L, fg = aclf.fuse_backward(dG0, cache["fuse"], params["fusion"])
    grads["fusion"].update(fg)
    for i in range(len(cache["smooth"]) - 1, -1, -1):
        dF_C, dF_L, deps, _ = ebfs.smooth_backward(dF_C, dF_L, cache["smooth"][i])
        grads["eps"][i] = deps
    dF_C, grads["enc_c"] = refine_block_backward(dF_C, cache["enc_c"], params["enc_c"])
    dF_L, grads["enc_l"] = refine_block_backward(dF_L, cache["enc_l"], params["enc_l"])
    grads["embed_c"] = cache["cam_raw"].T @ dF_C
    cg, dm, df = ldfa.camera_lift_backward(dF_C @ params["embed_c"].T, cache["cam"], params["cam"],
                                           inputs.camera.camera)
    grads["cam"].update(cg)
    ga["means"] = ga["means"] + dm
    ga["features"] += df
    if cfg.lift.use_lidar:
        grads["embed_l"] = cache["lid_raw"].T @ dF_L
        d_lid = dF_L @ params["embed_l"].T
        if cfg.lift.use_ldfa:
            lg, dm, df = ldfa.ldfa_lift_backward(d_lid, cache["lid"], params["ldfa"])
            grads["ldfa"].update(lg)
            ga["features"] += df
        else:
            dm = ldfa.column_mean_lift_backward(d_lid, cache["lid"])
        ga["means"] = ga["means"] + dm
    return grads


def loss_and_grads(params, cfg: ModelConfig, inputs: SceneInputs, labels, decisions: Decisions):
    logits, cache = forward(params, cfg, inputs, decisions)
    loss = losses.total_loss(logits, labels, cfg.loss)
    dlogits = losses.total_loss_backward(logits, labels, cfg.loss)
    grads = backward(dlogits, params, cfg, inputs, cache)
    return loss, grads, logits, cache


def predict(params, cfg: ModelConfig, inputs: SceneInputs):
    """Eval-mode class logits and labels."""
    logits, _ = forward(params, cfg, inputs, draw_decisions(cfg, None, train=False))
    return logits, argmax_labels(logits)


def check_tree_finite(tree, what: str):
    for path, a in tree_items(tree):
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite {what} in {path}")
