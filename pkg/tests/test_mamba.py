import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gaussocc.mamba import (HeadConfig, gauss_mamba_refine, init_block_params, init_head_params,
                            morton_encode, morton_order, positional_encode, quantize,
                            selective_scan, selective_scan_reference, ssm_block)
from gaussocc.numerics import make_rng
from gaussocc.scene import GaussianSet

LO, HI = np.zeros(3), np.ones(3) * 4.0


def random_set(seed, n=12, classes=3, feat=4):
    rng = make_rng(seed)
    return GaussianSet(means=rng.uniform(LO, HI, (n, 3)), quats=rng.normal(size=(n, 4)),
                       log_scales=rng.normal(-1.0, 0.3, (n, 3)), opacity_logits=rng.normal(size=n),
                       logits=rng.normal(size=(n, classes)), features=rng.normal(size=(n, feat)))


def scan_inputs(seed, L=20, di=4, n=3):
    rng = make_rng(seed)
    return (rng.normal(size=(L, di)), rng.uniform(0.05, 1.5, (L, di)), -rng.uniform(0.1, 3.0, (di, n)),
            rng.normal(size=(L, n)), rng.normal(size=(L, n)), rng.normal(size=di))


# --------------------------------------------------------------------------
# positional encoding
# --------------------------------------------------------------------------

def test_centre_encodes_to_sin_zero_cos_one():
    enc = positional_encode((LO + HI)[None] / 2, LO, HI, bands=3).reshape(3, 2, 3)
    np.testing.assert_allclose(enc[:, 0], 0.0, atol=1e-15)
    np.testing.assert_allclose(enc[:, 1], 1.0, atol=1e-15)


def test_quarter_period_encoding():
    # normalised x = 0.25 sits a quarter period into the base band
    mean = np.array([[0.625 * 4.0, 2.0, 2.0]])
    enc = positional_encode(mean, LO, HI, bands=1).reshape(2, 3)
    assert enc[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert enc[1, 0] == pytest.approx(0.0, abs=1e-15)


def test_identical_means_identical_codes():
    m = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    enc = positional_encode(m, LO, HI, bands=4)
    assert np.array_equal(enc[0], enc[1])


# --------------------------------------------------------------------------
# ordering
# --------------------------------------------------------------------------

def test_morton_keys_for_unit_cells():
    cells = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1], [2, 0, 0]])
    assert morton_encode(cells, 3).tolist() == [0, 1, 2, 4, 7, 8]


def test_origin_cell_comes_first():
    means = np.array([[3.0, 3.0, 3.0], [0.01, 0.01, 0.01], [2.0, 0.5, 1.0]])
    perm, _ = morton_order(means, LO, HI)
    assert perm[0] == 1


@given(st.lists(st.tuples(*[st.integers(0, 63)] * 3), min_size=1, max_size=40))
def test_morton_key_is_injective_and_recovers_cells(cells):
    cells = np.array(cells)
    keys = morton_encode(cells, 6)
    back = np.zeros_like(cells)
    for i in range(6):
        for axis in range(3):
            back[:, axis] |= ((keys >> (3 * i + axis)) & 1) << i
    assert np.array_equal(back, cells)


@given(st.integers(0, 10_000), st.integers(1, 60))
def test_order_is_a_bijection(seed, n):
    means = make_rng(seed).uniform(-1.0, 5.0, (n, 3))     # some outside the bounds
    perm, inv = morton_order(means, LO, HI)
    assert np.array_equal(np.sort(perm), np.arange(n))
    x = np.arange(n) * 10
    assert np.array_equal(x[perm][inv], x)


def test_ties_keep_original_order():
    means = np.tile([[1.0, 1.0, 1.0]], (5, 1))
    perm, _ = morton_order(means, LO, HI)
    assert perm.tolist() == [0, 1, 2, 3, 4]


def test_out_of_bounds_clamps():
    cells = quantize(np.array([[-3.0, 9.0, 2.0]]), LO, HI, 4)
    assert cells.tolist() == [[0, 15, 8]]


def test_ordering_is_local():
    def adjacent_chebyshev(cells):
        return np.abs(np.diff(cells, axis=0)).max(axis=1).mean()

    for seed in range(20):
        rng = make_rng(seed)
        means = rng.uniform(LO, HI, (300, 3))
        cells = quantize(means, LO, HI, 6)
        perm, _ = morton_order(means, LO, HI, 6)
        assert adjacent_chebyshev(cells[perm]) < adjacent_chebyshev(cells[rng.permutation(300)])


# --------------------------------------------------------------------------
# selective scan
# --------------------------------------------------------------------------

def one(x):
    return np.array([[x]], dtype=float)


def test_scan_single_step_identity():
    y, _ = selective_scan(one(2.5), one(1.0), one(0.0), one(1.0), one(1.0), np.zeros(1))
    assert y[0, 0] == 2.5


def test_scan_two_step_decay():
    u = np.ones((2, 1))
    y, _ = selective_scan(u, np.ones((2, 1)), one(-1.0), np.ones((2, 1)), np.ones((2, 1)), np.zeros(1))
    assert y[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert y[1, 0] == pytest.approx(math.exp(-1.0) + 1.0, abs=1e-15)


def test_scan_without_input_matrix_is_skip():
    u, dt, A, B, C, D = scan_inputs(3)
    y, _ = selective_scan(u, dt, A, np.zeros_like(B), C, D)
    np.testing.assert_allclose(y, D * u, atol=1e-15)


def test_scan_rejects_nonpositive_steps():
    u, dt, A, B, C, D = scan_inputs(0)
    dt[3, 1] = 0.0
    with pytest.raises(ValueError):
        selective_scan(u, dt, A, B, C, D)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("L", [1, 37, 512])
def test_scan_matches_plain_recurrence(seed, L):
    args = scan_inputs(seed, L=L, di=6, n=5)
    y, _ = selective_scan(*args)
    np.testing.assert_allclose(y, selective_scan_reference(*args), rtol=1e-12, atol=1e-12)


def test_scan_time_is_linear():
    def median_time(L):
        args = scan_inputs(0, L=L, di=16, n=16)
        ts = []
        for _ in range(5):
            t0 = time.perf_counter()
            selective_scan(*args)
            ts.append(time.perf_counter() - t0)
        return float(np.median(ts))

    median_time(64)                 # compile
    assert median_time(16384) <= 2.5 * median_time(8192)


# --------------------------------------------------------------------------
# block and refine
# --------------------------------------------------------------------------

def test_block_with_zero_output_map_is_identity():
    p = init_block_params(make_rng(0), 4, 3)           # w_out starts at zero
    x = make_rng(1).normal(size=(9, 4))
    out, _ = ssm_block(x, p)
    assert np.array_equal(out, x)


def identity_head(dim, classes, cfg):
    p = init_head_params(make_rng(0), dim, classes, cfg)
    p["w_pe"][dim:] = 0.0
    return p


def test_zero_weights_leave_set_unchanged():
    g = random_set(0)
    cfg = HeadConfig(blocks=2, state_dim=3, bands=2)
    out = gauss_mamba_refine(g, identity_head(4, 3, cfg), cfg, LO, HI)
    for name in ("means", "quats", "log_scales", "opacity_logits", "logits", "features"):
        np.testing.assert_allclose(getattr(out, name), getattr(g, name), atol=1e-15, err_msg=name)


def test_single_gaussian_hand_composition():
    # d = 1, one state, no positional bands: layer norm of one channel returns its bias
    cfg = HeadConfig(blocks=1, state_dim=1, bands=0)
    p = init_head_params(make_rng(0), 1, 1, cfg, zero_head=False)
    bp = p["blocks"][0]
    bp.update(ln_b=np.array([0.5]), w_in=np.array([[0.8, -0.6]]), w_dt=np.array([[0.3]]),
              b_dt=np.array([0.1]), w_B=np.array([[1.2]]), w_C=np.array([[-0.7]]),
              A_log=np.array([[0.0]]), D=np.array([0.4]), w_out=np.array([[1.5]]))
    p["w_head"] = np.linspace(-0.3, 0.3, p["w_head"].size).reshape(1, -1)
    p["b_head"] = np.zeros_like(p["b_head"])
    g = GaussianSet(means=np.array([[1.0, 2.0, 3.0]]), quats=np.array([[1.0, 0.0, 0.0, 0.0]]),
                    log_scales=np.zeros((1, 3)), opacity_logits=np.zeros(1), logits=np.zeros((1, 1)),
                    features=np.array([[0.9]]))
    out = gauss_mamba_refine(g, p, cfg, LO, HI)

    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    a, z = 0.5 * 0.8, 0.5 * -0.6
    u = a * sig(a)
    dt = math.log1p(math.exp(u * 0.3 + 0.1))
    h = dt * u * (u * 1.2)
    y = (u * -0.7) * h + 0.4 * u
    feat = 0.9 + 1.5 * y * z * sig(z)
    assert out.features[0, 0] == pytest.approx(feat, abs=1e-14)
    delta = feat * p["w_head"][0]
    np.testing.assert_allclose(out.means[0], [1.0, 2.0, 3.0] + delta[:3], atol=1e-14)
    np.testing.assert_allclose(out.log_scales[0], delta[3:6], atol=1e-14)
    q = np.array([1.0, 0, 0, 0]) + delta[6:10]
    np.testing.assert_allclose(out.quats[0], q / np.linalg.norm(q), atol=1e-14)
    assert out.opacity_logits[0] == pytest.approx(delta[10], abs=1e-14)
    assert out.logits[0, 0] == pytest.approx(delta[11], abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_refine_is_permutation_equivariant(seed):
    g = random_set(seed, n=16)
    cfg = HeadConfig(blocks=2, state_dim=3, bands=2, bits=12)
    p = init_head_params(make_rng(seed), 4, 3, cfg, zero_head=False)
    for bp in p["blocks"]:
        bp["w_out"] = make_rng(seed + 7).normal(0, 0.5, bp["w_out"].shape)
    keys = morton_encode(quantize(g.means, LO, HI, cfg.bits), cfg.bits)
    assert len(set(keys.tolist())) == len(g)
    perm = make_rng(seed + 1).permutation(len(g))
    a = gauss_mamba_refine(g, p, cfg, LO, HI)
    b = gauss_mamba_refine(g.take(perm), p, cfg, LO, HI)
    for name in ("means", "quats", "log_scales", "opacity_logits", "logits", "features"):
        np.testing.assert_allclose(getattr(b, name), getattr(a, name)[perm], rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_invariants_hold_after_refine(seed, scale):
    g = random_set(seed % 97, n=10)
    cfg = HeadConfig(blocks=1, state_dim=2, bands=1)
    p = init_head_params(make_rng(seed), 4, 3, cfg, zero_head=False)
    p["w_head"] *= scale * 100
    out = gauss_mamba_refine(g, p, cfg, LO, HI)
    np.testing.assert_allclose(np.linalg.norm(out.quats, axis=1), 1.0, atol=1e-12)
    assert np.all(out.scales > 0)
    assert np.all((out.opacities >= 0) & (out.opacities <= 1))


def test_head_config_validation():
    with pytest.raises(ValueError):
        HeadConfig(bits=0)
    with pytest.raises(ValueError):
        HeadConfig(state_dim=0)
    with pytest.raises(ValueError):
        HeadConfig(bands=-1)

