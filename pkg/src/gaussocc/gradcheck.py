"""Finite-difference verification of every hand-written backward pass.

Each case builds a small seeded problem: a dict of input arrays, a scalar
function of them (a random linear read-out of the op's output) and the
analytic gradient of that scalar.  :func:`check_case` compares the two with
central differences using the norm-wise relative error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import aclf, ebfs, ldfa, losses, mamba, numerics as nx, scene
from .numerics import finite_difference_gradient, make_rng, relative_error

OP_TOL = 1e-5
E2E_TOL = 1e-4
LATTICE_MARGIN = 1e-3


@dataclass
class Problem:
    values: dict
    loss: object
    grad: object


@dataclass
class CheckResult:
    name: str
    seed: int
    errors: dict
    tol: float
    criterion: str | None = None    # when set, only this entry decides pass/fail

    @property
    def worst(self) -> float:
        if self.criterion is not None:
            return self.errors[self.criterion]
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def ok(self) -> bool:
        return self.worst <= self.tol


def _readout(rng, shape):
    return rng.normal(size=shape)


def _off_lattice(*coords, margin=LATTICE_MARGIN):
    for c in coords:
        frac = np.abs(np.asarray(c) - np.round(c))
        if np.any(frac < margin):
            return False
    return True


def _with(values, key, arr):
    out = dict(values)
    out[key] = arr
    return out


# --------------------------------------------------------------------------
# core numerics
# --------------------------------------------------------------------------

def case_softmax(rng):
    x = rng.normal(size=(3, 5))
    G = _readout(rng, (3, 5))

    def f(v):
        return np.sum(nx.softmax(v["x"], -1, float(v["T"])) * G)

    def g(v):
        y = nx.softmax(v["x"], -1, float(v["T"]))
        dx, dT = nx.softmax_backward(G, y, -1, float(v["T"]), x=v["x"])
        return {"x": dx, "T": np.asarray(dT)}
    return Problem({"x": x, "T": np.asarray(rng.uniform(0.5, 2.0))}, f, g)


def case_layer_norm(rng):
    v0 = {"x": rng.normal(size=(4, 6)), "gain": rng.normal(size=6), "bias": rng.normal(size=6)}
    G = _readout(rng, (4, 6))

    def f(v):
        return np.sum(nx.layer_norm(v["x"], v["gain"], v["bias"])[0] * G)

    def g(v):
        _, cache = nx.layer_norm(v["x"], v["gain"], v["bias"])
        dx, dg, db = nx.layer_norm_backward(G, cache)
        return {"x": dx, "gain": dg, "bias": db}
    return Problem(v0, f, g)


def case_attention(rng):
    v0 = {"Q": rng.normal(size=(2, 3, 4)), "K": rng.normal(size=(2, 5, 4)),
          "V": rng.normal(size=(2, 5, 3))}
    G = _readout(rng, (2, 3, 3))

    def f(v):
        return np.sum(nx.scaled_dot_attention(v["Q"], v["K"], v["V"])[0] * G)

    def g(v):
        _, w = nx.scaled_dot_attention(v["Q"], v["K"], v["V"])
        dQ, dK, dV = nx.scaled_dot_attention_backward(G, v["Q"], v["K"], v["V"], w)
        return {"Q": dQ, "K": dK, "V": dV}
    return Problem(v0, f, g)


def case_cosine(rng):
    v0 = {"a": rng.normal(size=(5, 4)), "b": rng.normal(size=(5, 4))}
    G = _readout(rng, 5)

    def f(v):
        return np.sum(nx.cosine_similarity(v["a"], v["b"]) * G)

    def g(v):
        da, db = nx.cosine_similarity_backward(G, v["a"], v["b"])
        return {"a": da, "b": db}
    return Problem(v0, f, g)


def case_silu(rng):
    x = rng.normal(size=7) * 2
    G = _readout(rng, 7)
    return Problem({"x": x}, lambda v: np.sum(nx.silu(v["x"]) * G),
                   lambda v: {"x": G * nx.silu_grad(v["x"])})


# --------------------------------------------------------------------------
# Gaussian scene
# --------------------------------------------------------------------------

def case_rotation(rng):
    G = _readout(rng, (3, 3, 3))

    def f(v):
        return np.sum(scene.quat_to_rotmat(scene.normalize_quat(v["q"])) * G)

    def g(v):
        qh = scene.normalize_quat(v["q"])
        return {"q": scene.normalize_quat_backward(scene.quat_to_rotmat_backward(G, qh), v["q"])}
    return Problem({"q": rng.normal(size=(3, 4))}, f, g)


def case_splat(rng):
    spec = scene.GridSpec((0.0, 0.0, 0.0), 0.5, (5, 5, 5))
    N, C = 4, 3
    v0 = {"means": rng.uniform(0.3, 2.2, (N, 3)), "quats": rng.normal(size=(N, 4)),
          "log_scales": np.log(rng.uniform(0.3, 0.8, (N, 3))), "opacity_logits": rng.normal(size=N),
          "logits": rng.normal(size=(N, C))}
    feats = np.zeros((N, 1))
    G = _readout(rng, spec.shape + (C,))
    pairs = scene.splat_pairs(v0["means"], v0["log_scales"], spec, 3.0)

    def build(v):
        return scene.GaussianSet(v["means"], v["quats"], v["log_scales"], v["opacity_logits"],
                                 v["logits"], feats)

    def f(v):
        return np.sum(scene.splat(build(v), spec, 3.0, pairs=pairs, quats=v["quats"])[0] * G)

    def g(v):
        _, cache = scene.splat(build(v), spec, 3.0, pairs=pairs, quats=v["quats"])
        return scene.splat_backward(G, cache)
    return Problem(v0, f, g)


def case_refine_block(rng):
    d = 4
    p = scene.init_refine_params(rng, d, hidden=6)
    p["ln_g"] = rng.normal(size=d)
    p["b2"] = rng.normal(size=d)
    v0 = {"f": rng.normal(size=(5, d)), **p}
    G = _readout(rng, (5, d))

    def f(v):
        return np.sum(scene.refine_block(v["f"], v)[0] * G)

    def g(v):
        _, cache = scene.refine_block(v["f"], v)
        df, grads = scene.refine_block_backward(G, cache, v)
        return {"f": df, **grads}
    return Problem(v0, f, g)


# --------------------------------------------------------------------------
# lifting
# --------------------------------------------------------------------------

def case_bilinear(rng):
    planes = rng.normal(size=(3, 4, 5, 2))
    while True:
        u = rng.uniform(-1.0, 5.0, (3, 4))
        v = rng.uniform(-1.0, 4.0, (3, 4))
        if _off_lattice(u, v):
            break
    idx = np.arange(3)[:, None]
    G = _readout(rng, (3, 4, 2))

    def f(val):
        return np.sum(ldfa.bilinear_sample(planes, idx, val["u"], val["v"])[0] * G)

    def g(val):
        _, cache = ldfa.bilinear_sample(planes, idx, val["u"], val["v"])
        du, dv = ldfa.bilinear_sample_backward(G, cache)
        return {"u": du, "v": dv}
    return Problem({"u": u, "v": v}, f, g)


def case_cross_depth(rng):
    C = 3
    p = {"wq": rng.normal(size=(C, 4)), "wk": rng.normal(size=(C, 4)), "wv": rng.normal(size=(C, C))}
    v0 = {"chunks": rng.normal(size=(4, 3, C)), **p}
    G = _readout(rng, (4, C))

    def f(v):
        return np.sum(ldfa.cross_depth_modulation(v["chunks"], v)[0] * G)

    def g(v):
        _, cache = ldfa.cross_depth_modulation(v["chunks"], v)
        dc, grads = ldfa.cross_depth_modulation_backward(G, cache, v)
        return {"chunks": dc, **grads}
    return Problem(v0, f, g)


def _lidar_setup(rng, N=3, d=4, D=4, P=3):
    vol = ldfa.FeatureVolume(rng.normal(size=(3, D, 6, 6)), (0.0, 0.0, 0.0), 0.5)
    p = ldfa.init_ldfa_params(rng, d, D, P, att_dim=4)
    p["off_w"] = rng.normal(0.0, 0.3, p["off_w"].shape)
    p["wt_w"] = rng.normal(0.0, 0.5, p["wt_w"].shape)
    p["alpha_logit"] = np.asarray(rng.normal())
    return vol, p


def case_ldfa_lift(rng):
    N, d, D = 3, 4, 4
    while True:
        vol, p = _lidar_setup(rng, N, d, D)
        means = rng.uniform(0.2, 2.8, (N, 3))
        feats = rng.normal(size=(N, d))
        off = (feats @ p["off_w"] + p["off_b"]).reshape(N, D, -1, 2)
        u0, v0_ = vol.to_plane_coords(means)
        if _off_lattice(u0[:, None, None] + off[..., 0], v0_[:, None, None] + off[..., 1]):
            break
    plan = ldfa.make_chunk_plan(D, 2, rng)
    planes = vol.planes()
    G = _readout(rng, (N, 3))
    v0 = {"means": means, "feats": feats, **p}

    def f(v):
        return np.sum(ldfa.ldfa_lift(v["means"], v["feats"], vol, v, plan, planes)[0] * G)

    def g(v):
        _, cache = ldfa.ldfa_lift(v["means"], v["feats"], vol, v, plan, planes)
        grads, dm, df = ldfa.ldfa_lift_backward(G, cache, v)
        return {"means": dm, "feats": df, **grads}
    return Problem(v0, f, g)


def case_column_lift(rng):
    vol = ldfa.FeatureVolume(rng.normal(size=(3, 4, 6, 6)), (0.0, 0.0, 0.0), 0.5)
    while True:
        means = rng.uniform(0.2, 2.8, (4, 3))
        if _off_lattice(*vol.to_plane_coords(means)):
            break
    G = _readout(rng, (4, 3))

    def f(v):
        return np.sum(ldfa.column_mean_lift(v["means"], vol)[0] * G)

    def g(v):
        _, cache = ldfa.column_mean_lift(v["means"], vol)
        return {"means": ldfa.column_mean_lift_backward(G, cache)}
    return Problem({"means": means}, f, g)


def case_camera_lift(rng):
    N, d, P = 3, 4, 3
    cam = ldfa.PinholeCamera.look_at([1.5, -2.0, 3.0], [1.5, 1.5, 0.0], 10, 8, fov_deg=70.0)
    fmap = ldfa.CameraFeatureMap(rng.normal(size=(2, 8, 10)), cam)
    while True:
        p = ldfa.init_camera_params(rng, d, P, ring=1.5)
        p["off_w"] = rng.normal(0.0, 0.3, p["off_w"].shape)
        p["wt_w"] = rng.normal(0.0, 0.5, p["wt_w"].shape)
        means = rng.uniform(0.5, 2.5, (N, 3))
        feats = rng.normal(size=(N, d))
        u0, v0_, _, front = cam.project(means)
        off = (feats @ p["off_w"] + p["off_b"]).reshape(N, P, 2)
        if front.all() and _off_lattice(u0[:, None] + off[..., 0], v0_[:, None] + off[..., 1]):
            break
    G = _readout(rng, (N, 2))
    v0 = {"means": means, "feats": feats, **p}

    def f(v):
        return np.sum(ldfa.camera_lift(v["means"], v["feats"], fmap, v)[0] * G)

    def g(v):
        _, cache = ldfa.camera_lift(v["means"], v["feats"], fmap, v)
        grads, dm, df = ldfa.camera_lift_backward(G, cache, v, cam)
        return {"means": dm, "feats": df, **grads}
    return Problem(v0, f, g)


# --------------------------------------------------------------------------
# smoothing and fusion
# --------------------------------------------------------------------------

def case_smooth(rng):
    N, d = 4, 5
    GC, GL = _readout(rng, (N, d)), _readout(rng, (N, d))
    v0 = {"F_C": rng.normal(size=(N, d)), "F_L": rng.normal(size=(N, d)),
          "eps": np.asarray(rng.normal()), "tau": np.asarray(rng.uniform(0.5, 2.0))}

    def f(v):
        cfg = ebfs.SmoothingConfig(tau=float(v["tau"]))
        a, b, _ = ebfs.smooth(v["F_C"], v["F_L"], float(v["eps"]), cfg)
        return np.sum(a * GC) + np.sum(b * GL)

    def g(v):
        cfg = ebfs.SmoothingConfig(tau=float(v["tau"]))
        _, _, cache = ebfs.smooth(v["F_C"], v["F_L"], float(v["eps"]), cfg)
        dC, dL, de, dt = ebfs.smooth_backward(GC, GL, cache)
        return {"F_C": dC, "F_L": dL, "eps": np.asarray(de), "tau": np.asarray(dt)}
    return Problem(v0, f, g)


def _fusion_case(mode, heads=1):
    def build(rng):
        N, d = 4, 4
        p = aclf.init_fusion_params(rng, d, mode=mode)
        for k in p:
            if k in ("ch_w", "ch_b", "g_b1", "g_b2", "cat_b"):
                p[k] = rng.normal(size=p[k].shape)
        G = _readout(rng, (N, d))
        v0 = {"F_C": rng.normal(size=(N, d)), "F_L": rng.normal(size=(N, d)), **p}

        def f(v):
            return np.sum(aclf.fuse(v["F_C"], v["F_L"], v, mode, heads)[0] * G)

        def g(v):
            _, cache = aclf.fuse(v["F_C"], v["F_L"], v, mode, heads)
            dC, dL, grads = aclf.fuse_backward(G, cache, v)
            return {"F_C": dC, "F_L": dL, **grads}
        return Problem(v0, f, g)
    return build


# --------------------------------------------------------------------------
# refinement head
# --------------------------------------------------------------------------

def case_positional(rng):
    lo, hi = np.zeros(3), np.array([2.0, 3.0, 1.5])
    G = _readout(rng, (4, 12))

    def f(v):
        return np.sum(mamba.positional_encode(v["means"], lo, hi, 2) * G)

    def g(v):
        return {"means": mamba.positional_encode_backward(G, v["means"], lo, hi, 2)}
    return Problem({"means": rng.uniform(0, 1.5, (4, 3))}, f, g)


def case_scan(rng):
    L, di, n = 6, 3, 2
    v0 = {"u": rng.normal(size=(L, di)), "delta": rng.uniform(0.1, 1.0, (L, di)),
          "A": -rng.uniform(0.2, 2.0, (di, n)), "B": rng.normal(size=(L, n)),
          "C": rng.normal(size=(L, n)), "D": rng.normal(size=di)}
    G = _readout(rng, (L, di))
    keys = ("u", "delta", "A", "B", "C", "D")

    def f(v):
        return np.sum(mamba.selective_scan(*(v[k] for k in keys))[0] * G)

    def g(v):
        y, hs = mamba.selective_scan(*(v[k] for k in keys))
        return dict(zip(keys, mamba.selective_scan_backward(G, *(v[k] for k in keys), hs)))
    return Problem(v0, f, g)


def case_ssm_block(rng):
    d, n = 4, 3
    # a step size near one keeps the state decay sensitive to A, so the check is well conditioned
    p = mamba.init_block_params(rng, d, n, dt_range=(0.3, 1.0), zero_out=False)
    p["ln_b"] = rng.normal(0, 0.3, d)
    v0 = {"x": rng.normal(size=(6, d)), **p}
    G = _readout(rng, (6, d))

    def f(v):
        return np.sum(mamba.ssm_block(v["x"], v)[0] * G)

    def g(v):
        _, cache = mamba.ssm_block(v["x"], v)
        dx, grads = mamba.ssm_block_backward(G, cache, v)
        return {"x": dx, **grads}
    return Problem(v0, f, g)


def case_head(rng):
    N, d, C = 5, 4, 3
    cfg = mamba.HeadConfig(blocks=1, state_dim=2, bands=1)
    p = mamba.init_head_params(rng, d, C, cfg, zero_head=False)
    p["blocks"][0] = mamba.init_block_params(rng, d, cfg.state_dim, dt_range=(0.3, 1.0), zero_out=False)
    lo, hi = np.zeros(3), np.full(3, 2.0)
    arrays = {"means": rng.uniform(0, 2, (N, 3)), "quats": rng.normal(size=(N, 4)),
              "log_scales": rng.normal(size=(N, 3)), "opacity_logits": rng.normal(size=N),
              "logits": rng.normal(size=(N, C)), "features": rng.normal(size=(N, d))}
    order = mamba.morton_order(arrays["means"], lo, hi, cfg.bits)
    Gs = {k: _readout(rng, a.shape) for k, a in arrays.items()}
    v0 = {**arrays, "w_pe": p["w_pe"], "w_head": p["w_head"], "b_head": p["b_head"],
          **{f"block_{k}": a for k, a in p["blocks"][0].items()}}

    def unpack(v):
        arr = {k: v[k] for k in arrays}
        q = {"w_pe": v["w_pe"], "w_head": v["w_head"], "b_head": v["b_head"],
             "blocks": [{k[6:]: v[k] for k in v if k.startswith("block_")}]}
        return arr, q

    def f(v):
        arr, q = unpack(v)
        new, _ = mamba.refine_arrays(arr, q, cfg, lo, hi, order=order)
        return sum(np.sum(new[k] * Gs[k]) for k in new)

    def g(v):
        arr, q = unpack(v)
        _, cache = mamba.refine_arrays(arr, q, cfg, lo, hi, order=order)
        grads, darr = mamba.refine_arrays_backward(Gs, cache, q)
        out = dict(darr)
        out.update(w_pe=grads["w_pe"], w_head=grads["w_head"], b_head=grads["b_head"])
        out.update({f"block_{k}": a for k, a in grads["blocks"][0].items()})
        return out
    return Problem(v0, f, g)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def case_total_loss(rng):
    x = rng.normal(size=(3, 3, 2, 4))
    y = rng.integers(0, 4, (3, 3, 2))
    w = losses.LossWeights(1.0, 1.0)
    return Problem({"logits": x}, lambda v: losses.total_loss(v["logits"], y, w),
                   lambda v: {"logits": losses.total_loss_backward(v["logits"], y, w)})


def case_lovasz(rng):
    x = rng.normal(size=(12, 3))
    y = rng.integers(0, 3, 12)
    return Problem({"logits": x}, lambda v: losses.lovasz_softmax(v["logits"], y),
                   lambda v: {"logits": losses.lovasz_softmax_backward(v["logits"], y)})


def case_ce(rng):
    x = rng.normal(size=(10, 4))
    y = rng.integers(0, 4, 10)
    return Problem({"logits": x}, lambda v: losses.ce_loss(v["logits"], y),
                   lambda v: {"logits": losses.ce_loss_backward(v["logits"], y)})


OP_CASES = {
    "softmax": case_softmax,
    "layer_norm": case_layer_norm,
    "attention": case_attention,
    "cosine_similarity": case_cosine,
    "silu": case_silu,
    "quaternion_rotation": case_rotation,
    "splat": case_splat,
    "refine_block": case_refine_block,
    "bilinear_sample": case_bilinear,
    "cross_depth_modulation": case_cross_depth,
    "ldfa_lift": case_ldfa_lift,
    "column_mean_lift": case_column_lift,
    "camera_lift": case_camera_lift,
    "ebfs_smooth": case_smooth,
    "fuse_aclf": _fusion_case("aclf"),
    "fuse_aclf_2head": _fusion_case("aclf", heads=2),
    "fuse_add": _fusion_case("add"),
    "fuse_concat": _fusion_case("concat"),
    "positional_encode": case_positional,
    "selective_scan": case_scan,
    "ssm_block": case_ssm_block,
    "mamba_head": case_head,
    "ce_loss": case_ce,
    "lovasz_softmax": case_lovasz,
    "total_loss": case_total_loss,
}


def gradients(prob: Problem, h: float = nx.FD_STEP):
    """``(analytic, numeric)`` gradient dicts keyed like ``prob.values``."""
    analytic = prob.grad(prob.values)
    numeric = {}
    for key, base in prob.values.items():
        numeric[key] = finite_difference_gradient(
            lambda a, key=key: prob.loss(_with(prob.values, key, a)), np.asarray(base, dtype=float), h)
    return analytic, numeric


def check_problem(name: str, seed: int, prob: Problem, tol: float, h: float = nx.FD_STEP):
    analytic, numeric = gradients(prob, h)
    errors = {k: relative_error(analytic[k], numeric[k]) for k in prob.values}
    return CheckResult(name, seed, errors, tol)


def check_case(name: str, seed: int, tol: float = OP_TOL) -> CheckResult:
    rng = make_rng(seed)
    return check_problem(name, seed, OP_CASES[name](rng), tol)


# --------------------------------------------------------------------------
# end to end
# --------------------------------------------------------------------------

def tiny_config():
    from .config import (FusionConfig, GridConfig, LiftConfig, ModelConfig, OptimConfig,
                         SmoothConfig)

    return ModelConfig(
        seed=0, num_gaussians=2, num_classes=3, feat_dim=4, init_scale=1.2,
        grid=GridConfig((0.0, 0.0, 0.0), 0.5, (4, 4, 4), 3.0),
        lift=LiftConfig(depth_planes=4, keypoints=2, chunks=2, att_dim=3, camera_keypoints=2,
                        camera_ring=1.0),
        smooth=SmoothConfig(layers=2),
        fusion=FusionConfig("aclf"),
        head=mamba.HeadConfig(blocks=1, state_dim=2, bits=2, bands=1),
        optim=OptimConfig(steps=10),
    )


def _randomize(params, rng, skip=("anchors",)):
    """Give every zero-initialised leaf a random value so all paths carry gradient."""
    from .model import tree_items

    for path, a in tree_items(params):
        if path.split("/")[0] in skip:
            continue
        a += rng.normal(0.0, 0.3, a.shape)


def end_to_end_problem(seed: int, cfg=None):
    """All parameters of the tiny pipeline as one flat problem (decisions frozen)."""
    from .model import (SceneInputs, draw_decisions, frozen_decisions, forward, backward,
                        grid_spec, init_params, tree_items)
    from .synthetic import SceneSpec, Shape, generate_scene

    cfg = cfg or tiny_config()
    rng = make_rng(seed)
    spec = grid_spec(cfg)
    shapes = [Shape("ground", 1, {"height": 0.5}),
              Shape("box", 2, {"center": rng.uniform(0.6, 1.4, 3).tolist(),
                               "half": [0.4, 0.3, 0.3], "yaw": float(rng.uniform(0, 3))})]
    sc = generate_scene(SceneSpec(spec, shapes, cfg.num_classes, image_size=(8, 10)), seed)
    inputs = SceneInputs.from_scene(sc)
    params = init_params(cfg, rng)
    _randomize(params, rng)
    A = params["anchors"]
    A["means"] = rng.uniform(0.4, 1.6, A["means"].shape)
    A["logits"] = rng.normal(size=A["logits"].shape)
    A["features"] = rng.normal(size=A["features"].shape)
    A["opacity_logits"] = rng.normal(size=A["opacity_logits"].shape)
    A["quats"] = A["quats"] + rng.normal(0.0, 0.3, A["quats"].shape)
    dec = draw_decisions(cfg, rng, train=True)
    dec.selection[:] = True
    _, cache = forward(params, cfg, inputs, dec)
    dec = frozen_decisions(dec, cache)
    labels = sc.labels
    leaves = dict(tree_items(params))

    def f(values):
        for k, a in values.items():
            leaves[k][...] = a
        logits, _ = forward(params, cfg, inputs, dec)
        return losses.total_loss(logits, labels, cfg.loss)

    base = {k: a.copy() for k, a in leaves.items()}

    def g(values):
        for k, a in values.items():
            leaves[k][...] = a
        logits, c = forward(params, cfg, inputs, dec)
        grads = backward(losses.total_loss_backward(logits, labels, cfg.loss), params, cfg, inputs, c)
        return dict(tree_items(grads))
    return Problem(base, f, g)


def check_end_to_end(seed: int = 0, tol: float = E2E_TOL) -> CheckResult:
    prob = end_to_end_problem(seed)
    analytic, numeric = gradients(prob)
    keys = sorted(prob.values)
    a = np.concatenate([np.ravel(analytic[k]) for k in keys])
    n = np.concatenate([np.ravel(numeric[k]) for k in keys])
    # the flat norm over every parameter decides; leaves whose gradient is near zero sit at
    # the rounding floor, so their individual errors are diagnostics only
    errors = {"all_parameters": relative_error(a, n)}
    errors.update({f"leaf:{k}": relative_error(analytic[k], numeric[k]) for k in keys})
    return CheckResult("end_to_end", seed, errors, tol, criterion="all_parameters")


def run_suite(seeds=range(20), names=None, e2e_seeds=(0,), log=None):
    """Every op on every seed plus the end-to-end check.  Returns the result list."""
    results = []
    for name in names or OP_CASES:
        for seed in seeds:
            r = check_case(name, seed)
            results.append(r)
            if log:
                log(r)
    for seed in e2e_seeds:
        r = check_end_to_end(seed)
        results.append(r)
        if log:
            log(r)
    return results
