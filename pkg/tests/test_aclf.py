import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gaussocc.aclf import (consistency_reweight, consistency_reweight_backward, dual_cross_attention,
                           fuse, gated_mix, init_fusion_params)
from gaussocc.numerics import make_rng, sigmoid
from gaussocc.report import sign_test

from conftest import finite_arrays


def params(seed=0, d=4, mode="aclf"):
    return init_fusion_params(make_rng(seed), d, mode=mode)


def streams(seed=0, n=5, d=4):
    rng = make_rng(seed + 100)
    return rng.normal(size=(n, d)), rng.normal(size=(n, d))


# --------------------------------------------------------------------------
# cross attention
# --------------------------------------------------------------------------

def test_zero_values_give_residual_identity():
    p = params()
    p["wv_c"][:] = 0.0
    p["wv_l"][:] = 0.0
    F_L, F_C = streams()
    H_L, H_C, _ = dual_cross_attention(F_L, F_C, p)
    assert np.array_equal(H_L, F_L)
    assert np.array_equal(H_C, F_C)


def test_single_gaussian_adds_value_projection():
    p = params()
    F_L, F_C = streams(n=1)
    H_L, H_C, _ = dual_cross_attention(F_L, F_C, p)
    np.testing.assert_allclose(H_L, F_L + F_C @ p["wv_c"], atol=1e-14)
    np.testing.assert_allclose(H_C, F_C + F_L @ p["wv_l"], atol=1e-14)


def test_two_by_two_hand_attention():
    p = params(d=2)
    for k in ("wq_l", "wk_c", "wv_c", "wq_c", "wk_l", "wv_l"):
        p[k] = np.eye(2)
    F_L = np.array([[1.0, 0.0], [0.0, 1.0]])
    F_C = np.array([[2.0, 0.0], [0.0, 1.0]])
    H_L, _, _ = dual_cross_attention(F_L, F_C, p)
    # row 0: scores (2, 0)/sqrt2; row 1: scores (0, 1)/sqrt2
    a0 = math.exp(2 / math.sqrt(2)) / (math.exp(2 / math.sqrt(2)) + 1.0)
    a1 = 1.0 / (1.0 + math.exp(1 / math.sqrt(2)))
    expect = np.array([[1.0 + 2.0 * a0, 1.0 - a0],
                       [2.0 * a1, 1.0 + (1.0 - a1)]])
    np.testing.assert_allclose(H_L, expect, atol=1e-14)


def test_attention_rejects_mismatch_and_bad_heads():
    p = params()
    F_L, F_C = streams()
    with pytest.raises(ValueError):
        dual_cross_attention(F_L, F_C[:3], p)
    with pytest.raises(ValueError):
        dual_cross_attention(F_L, F_C, p, heads=3)


# --------------------------------------------------------------------------
# gate
# --------------------------------------------------------------------------

def test_saturated_gate_selects_lidar():
    p = params()
    p["g_b2"][:] = 50.0
    H_L, H_C = streams()
    fused, gate, _ = gated_mix(H_L, H_C, p)
    np.testing.assert_allclose(fused, H_L, atol=1e-6)


def test_zero_gate_mlp_averages():
    p = params()
    for k in ("g_w1", "g_b1", "g_w2", "g_b2"):
        p[k][...] = 0.0
    H_L, H_C = streams()
    fused, gate, _ = gated_mix(H_L, H_C, p)
    assert np.all(gate == 0.5)
    np.testing.assert_allclose(fused, 0.5 * (H_L + H_C), atol=1e-15)


def test_equal_streams_pass_through_gate():
    H, _ = streams()
    fused, _, _ = gated_mix(H, H.copy(), params())
    np.testing.assert_allclose(fused, H, atol=1e-15)


@given(finite_arrays((6, 4), -30, 30), finite_arrays((6, 4), -30, 30), st.integers(0, 50))
def test_gate_outputs_in_range_and_between_streams(H_L, H_C, seed):
    fused, gate, _ = gated_mix(H_L, H_C, params(seed))
    assert np.all((gate >= 0) & (gate <= 1))
    lo, hi = np.minimum(H_L, H_C), np.maximum(H_L, H_C)
    slack = 1e-12 * (1 + np.abs(hi))
    assert np.all(fused >= lo - slack) and np.all(fused <= hi + slack)


# --------------------------------------------------------------------------
# consistency gate
# --------------------------------------------------------------------------

def test_identical_latents_give_maximal_gate():
    p = params()
    p["p_c"] = p["p_l"].copy()
    F, _ = streams()
    H, _ = streams(seed=3)
    out, W, _ = consistency_reweight(H, F, F, p)
    g_max = sigmoid(p["ch_w"] * 1.0 + p["ch_b"])
    np.testing.assert_allclose(W, np.broadcast_to(g_max, W.shape), atol=1e-12)
    np.testing.assert_allclose(out, H * g_max, atol=1e-12)


@pytest.mark.parametrize("bias, expect", [(60.0, "H"), (-60.0, "zero")])
def test_saturated_consistency_gate(bias, expect):
    p = params()
    p["ch_w"][:] = 0.0
    p["ch_b"][:] = bias
    F_L, F_C = streams()
    H, _ = streams(seed=9)
    out, W, _ = consistency_reweight(H, F_C, F_L, p)
    target = H if expect == "H" else np.zeros_like(H)
    np.testing.assert_allclose(out, target, atol=1e-12)


@given(finite_arrays((5, 4), -20, 20), finite_arrays((5, 4), -20, 20), st.integers(0, 50))
def test_consistency_weights_in_unit_interval(F_C, F_L, seed):
    _, W, _ = consistency_reweight(np.ones_like(F_C), F_C, F_L, params(seed))
    assert np.all((W >= 0) & (W <= 1))


# --------------------------------------------------------------------------
# composite
# --------------------------------------------------------------------------

def test_composite_reduces_to_mean():
    p = params()
    p["wv_c"][:] = 0.0
    p["wv_l"][:] = 0.0
    for k in ("g_w1", "g_b1", "g_w2", "g_b2"):
        p[k][...] = 0.0
    p["ch_w"][:] = 0.0
    p["ch_b"][:] = 60.0
    F_L, F_C = streams()
    out, _ = fuse(F_C, F_L, p)
    np.testing.assert_allclose(out, 0.5 * (F_L + F_C), atol=1e-12)


def test_zero_streams_fuse_to_zero():
    Z = np.zeros((4, 4))
    out, _ = fuse(Z, Z, params())
    assert np.all(out == 0.0)


def test_fuse_is_deterministic():
    F_L, F_C = streams()
    a, _ = fuse(F_C, F_L, params())
    b, _ = fuse(F_C.copy(), F_L.copy(), params())
    assert np.array_equal(a, b)


@pytest.mark.parametrize("mode", ["add", "concat", "aclf"])
@pytest.mark.parametrize("seed", range(5))
def test_permutation_equivariance(mode, seed):
    p = params(seed, mode=mode)
    F_L, F_C = streams(seed, n=7)
    perm = make_rng(seed).permutation(7)
    out, _ = fuse(F_C, F_L, p, mode)
    out_p, _ = fuse(F_C[perm], F_L[perm], p, mode)
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-12, atol=1e-13)


def test_unknown_mode():
    with pytest.raises(ValueError):
        fuse(*streams(), {}, "mean")
    with pytest.raises(ValueError):
        init_fusion_params(make_rng(0), 4, mode="mean")


def test_add_mode_sums():
    F_L, F_C = streams()
    out, _ = fuse(F_C, F_L, {}, "add")
    assert np.array_equal(out, F_L + F_C)


# --------------------------------------------------------------------------
# noise suppression after a short calibration fit
# --------------------------------------------------------------------------

def noise_fixture(seed, n=160, d=8, noisy_frac=0.3):
    """Camera features are a fixed linear view of the LiDAR features plus small noise,
    except on a marked subset where they are replaced by pure noise."""
    rng = make_rng(seed)
    centers = rng.normal(size=(4, d)) * 2.0
    F_L = centers[rng.integers(0, 4, n)] + 0.3 * rng.normal(size=(n, d))
    A = np.linalg.qr(rng.normal(size=(d, d)))[0]
    clean = F_L @ A
    F_C = clean + 0.1 * rng.normal(size=(n, d))
    noisy = rng.random(n) < noisy_frac
    F_C[noisy] = rng.normal(size=(int(noisy.sum()), d)) * clean.std()
    return F_C, F_L, clean, noisy


def calibrate(F_C, F_L, target, p, steps=150, lr=0.05):
    """Gradient descent on ``|F_C * W - target|^2`` over the consistency-gate parameters:
    the gate should pass camera features that agree with the target and suppress the rest."""
    keys = ("p_c", "p_l", "ch_w", "ch_b")
    n = F_C.shape[0]
    for _ in range(steps):
        out, W, cache = consistency_reweight(F_C, F_C, F_L, p)
        dout = 2.0 * (out - target) / n
        _, _, _, g = consistency_reweight_backward(dout, F_C, F_C, F_L, cache, p)
        for k in keys:
            p[k] = p[k] - lr * g[k]
    return consistency_reweight(F_C, F_C, F_L, p)[1]


def test_noise_subset_gets_lower_consistency_weight():
    gaps = []
    for seed in range(20):
        F_C, F_L, clean, noisy = noise_fixture(seed)
        p = init_fusion_params(make_rng(seed + 1), F_C.shape[1])
        W = calibrate(F_C, F_L, clean, p)
        gaps.append(W[~noisy].mean() - W[noisy].mean())
    wins, ties, pval = sign_test(gaps)
    assert pval < 0.05, (wins, ties, gaps)
