"""Adaptive camera-LiDAR fusion and the two rigid baselines (add, concat)."""

from __future__ import annotations

import numpy as np

from .numerics import (cosine_similarity, cosine_similarity_backward, scaled_dot_attention,
                       scaled_dot_attention_backward, sigmoid, silu, silu_grad)

FUSION_MODES = ("add", "concat", "aclf")


def init_fusion_params(rng, dim: int, proj_dim: int | None = None, mode: str = "aclf"):
    d = dim
    if mode == "add":
        return {}
    if mode == "concat":
        return {
            "cat_w": np.vstack([np.eye(d), np.eye(d)]) * 0.5 + rng.normal(0.0, 0.02, (2 * d, d)),
            "cat_b": np.zeros(d),
        }
    if mode != "aclf":
        raise ValueError(f"unknown fusion mode {mode!r}")
    dp = proj_dim or d
    s = 1.0 / np.sqrt(d)
    return {
        "wq_l": rng.normal(0.0, s, (d, d)),
        "wk_c": rng.normal(0.0, s, (d, d)),
        "wv_c": rng.normal(0.0, s, (d, d)),
        "wq_c": rng.normal(0.0, s, (d, d)),
        "wk_l": rng.normal(0.0, s, (d, d)),
        "wv_l": rng.normal(0.0, s, (d, d)),
        "g_w1": rng.normal(0.0, 1.0 / np.sqrt(2 * d), (2 * d, d)),
        "g_b1": np.zeros(d),
        "g_w2": rng.normal(0.0, s, (d, d)),
        "g_b2": np.zeros(d),
        "p_c": rng.normal(0.0, s, (d, dp)),
        "p_l": rng.normal(0.0, s, (d, dp)),
        "ch_w": np.ones(d),
        "ch_b": np.ones(d),
    }


# --------------------------------------------------------------------------
# dual-stream cross-attention
# --------------------------------------------------------------------------

def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _cross(F_q, F_kv, wq, wk, wv, heads):
    Q = _split_heads(F_q @ wq, heads)
    K = _split_heads(F_kv @ wk, heads)
    V = _split_heads(F_kv @ wv, heads)
    att, w = scaled_dot_attention(Q, K, V)
    return _merge_heads(att), (Q, K, V, w)


def _cross_backward(datt, F_q, F_kv, cache, wq, wk, wv, heads):
    Q, K, V, w = cache
    dQ, dK, dV = scaled_dot_attention_backward(_split_heads(datt, heads), Q, K, V, w)
    dQ, dK, dV = _merge_heads(dQ), _merge_heads(dK), _merge_heads(dV)
    g = (F_q.T @ dQ, F_kv.T @ dK, F_kv.T @ dV)
    dF_q = dQ @ wq.T
    dF_kv = dK @ wk.T + dV @ wv.T
    return dF_q, dF_kv, g


def dual_cross_attention(F_L, F_C, p, heads: int = 1):
    """``H_L = F_L + attn(F_L -> F_C)``, ``H_C = F_C + attn(F_C -> F_L)`` over all Gaussians."""
    if F_L.shape != F_C.shape:
        raise ValueError("streams must share a shape")
    if F_L.shape[1] % heads:
        raise ValueError("feature dim must be divisible by the head count")
    a_l, c_l = _cross(F_L, F_C, p["wq_l"], p["wk_c"], p["wv_c"], heads)
    a_c, c_c = _cross(F_C, F_L, p["wq_c"], p["wk_l"], p["wv_l"], heads)
    return F_L + a_l, F_C + a_c, (c_l, c_c, heads)


def dual_cross_attention_backward(dH_L, dH_C, F_L, F_C, cache, p):
    c_l, c_c, heads = cache
    dq1, dkv1, g1 = _cross_backward(dH_L, F_L, F_C, c_l, p["wq_l"], p["wk_c"], p["wv_c"], heads)
    dq2, dkv2, g2 = _cross_backward(dH_C, F_C, F_L, c_c, p["wq_c"], p["wk_l"], p["wv_l"], heads)
    grads = {"wq_l": g1[0], "wk_c": g1[1], "wv_c": g1[2],
             "wq_c": g2[0], "wk_l": g2[1], "wv_l": g2[2]}
    dF_L = dH_L + dq1 + dkv2
    dF_C = dH_C + dq2 + dkv1
    return dF_L, dF_C, grads


# --------------------------------------------------------------------------
# soft gate
# --------------------------------------------------------------------------

def gated_mix(H_L, H_C, p):
    """Returns ``(H_fused, M_gate, cache)``."""
    x = np.concatenate([H_L, H_C], axis=1)
    h = x @ p["g_w1"] + p["g_b1"]
    a = silu(h)
    gl = a @ p["g_w2"] + p["g_b2"]
    gate = sigmoid(gl)
    fused = gate * H_L + (1.0 - gate) * H_C
    return fused, gate, (x, h, a, gate)


def gated_mix_backward(dfused, H_L, H_C, cache, p):
    x, h, a, gate = cache
    d = H_L.shape[1]
    dgate = dfused * (H_L - H_C)
    dgl = dgate * gate * (1.0 - gate)
    grads = {"g_w2": a.T @ dgl, "g_b2": dgl.sum(axis=0)}
    dh = (dgl @ p["g_w2"].T) * silu_grad(h)
    grads["g_w1"] = x.T @ dh
    grads["g_b1"] = dh.sum(axis=0)
    dx = dh @ p["g_w1"].T
    dH_L = dfused * gate + dx[:, :d]
    dH_C = dfused * (1.0 - gate) + dx[:, d:]
    return dH_L, dH_C, grads


# --------------------------------------------------------------------------
# consistency gate
# --------------------------------------------------------------------------

def consistency_reweight(H_fused, F_C, F_L, p):
    """Channel gate from the cosine agreement of projected camera/LiDAR latents.

    Returns ``(F_final, W_consist, cache)``.
    """
    zc = F_C @ p["p_c"]
    zl = F_L @ p["p_l"]
    cos = cosine_similarity(zc, zl)
    s = 0.5 * (1.0 + cos)
    W = sigmoid(s[:, None] * p["ch_w"] + p["ch_b"])
    return H_fused * W, W, (zc, zl, s, W)


def consistency_reweight_backward(dout, H_fused, F_C, F_L, cache, p):
    zc, zl, s, W = cache
    dH = dout * W
    dWl = dout * H_fused * W * (1.0 - W)
    grads = {"ch_w": np.sum(dWl * s[:, None], axis=0), "ch_b": dWl.sum(axis=0)}
    ds = dWl @ p["ch_w"]
    dzc, dzl = cosine_similarity_backward(0.5 * ds, zc, zl)
    grads["p_c"] = F_C.T @ dzc
    grads["p_l"] = F_L.T @ dzl
    return dH, dzc @ p["p_c"].T, dzl @ p["p_l"].T, grads


# --------------------------------------------------------------------------
# composite
# --------------------------------------------------------------------------

def fuse(F_C, F_L, p, mode: str = "aclf", heads: int = 1):
    """Fuse the two streams into one (N, d) feature.  Returns ``(F, cache)``."""
    if mode == "add":
        return F_L + F_C, (mode,)
    if mode == "concat":
        x = np.concatenate([F_L, F_C], axis=1)
        return x @ p["cat_w"] + p["cat_b"], (mode, x)
    if mode != "aclf":
        raise ValueError(f"unknown fusion mode {mode!r}")
    H_L, H_C, c_att = dual_cross_attention(F_L, F_C, p, heads)
    fused, gate, c_gate = gated_mix(H_L, H_C, p)
    out, W, c_cons = consistency_reweight(fused, F_C, F_L, p)
    return out, (mode, F_C, F_L, H_L, H_C, fused, c_att, c_gate, c_cons, gate, W)


def fuse_backward(dout, cache, p):
    """Returns ``(dF_C, dF_L, grads)``."""
    mode = cache[0]
    if mode == "add":
        return dout, dout, {}
    if mode == "concat":
        x = cache[1]
        dx = dout @ p["cat_w"].T
        d = dout.shape[1]
        return dx[:, d:], dx[:, :d], {"cat_w": x.T @ dout, "cat_b": dout.sum(axis=0)}
    _, F_C, F_L, H_L, H_C, fused, c_att, c_gate, c_cons, _, _ = cache
    dfused, dF_C, dF_L, grads = consistency_reweight_backward(dout, fused, F_C, F_L, c_cons, p)
    dH_L, dH_C, g = gated_mix_backward(dfused, H_L, H_C, c_gate, p)
    grads.update(g)
    a_L, a_C, g = dual_cross_attention_backward(dH_L, dH_C, F_L, F_C, c_att, p)
    grads.update(g)
    return dF_C + a_C, dF_L + a_L, grads
