import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import finite_arrays
from gaussocc.numerics import (NumericalError, cosine_similarity, finite_difference_gradient,
                               layer_norm, make_rng, relative_error, scaled_dot_attention, softmax,
                               spawn_rng)


# ---- softmax ----------------------------------------------------------------

def test_softmax_symmetric_pair():
    np.testing.assert_array_equal(softmax(np.array([0.0, 0.0])), [0.5, 0.5])


def test_softmax_closed_form_against_mpmath():
    e = mpmath.e
    want = [float(e / (e + 1)), float(1 / (e + 1))]
    np.testing.assert_allclose(softmax(np.array([1.0, 0.0])), want, rtol=0, atol=1e-15)
    np.testing.assert_allclose(softmax(np.array([1.0, 0.0])), [0.73106, 0.26894], atol=5e-6)


def test_softmax_high_temperature_is_uniform():
    y = softmax(np.array([5.0, -5.0]), temperature=1e6)
    assert np.all(np.abs(y - 0.5) <= 1e-5)


def test_softmax_rejects_bad_temperature_and_nonfinite():
    with pytest.raises(ValueError):
        softmax(np.zeros(3), temperature=0.0)
    with pytest.raises(ValueError):
        softmax(np.zeros(3), temperature=-1.0)
    with pytest.raises(NumericalError):
        softmax(np.array([0.0, np.nan]))
    with pytest.raises(NumericalError):
        softmax(np.array([0.0, np.inf]))


@given(finite_arrays((3, 5), -30, 30), st.floats(-50, 50), st.floats(0.1, 10.0))
def test_softmax_shift_invariant_and_normalised(x, c, tau):
    y = softmax(x, axis=-1, temperature=tau)
    np.testing.assert_allclose(y, softmax(x + c, axis=-1, temperature=tau), rtol=0, atol=1e-12)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@given(finite_arrays(6, -20, 20))
def test_softmax_preserves_order(x):
    y = softmax(x)
    i, j = np.triu_indices(6, 1)
    strict = x[i] > x[j]
    assert np.all(y[i][strict] >= y[j][strict])


def test_softmax_on_other_axis():
    x = make_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(softmax(x, axis=0).sum(axis=0), 1.0, atol=1e-12)


# ---- layer norm -------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    y, _ = layer_norm(np.ones(3), np.ones(3), np.zeros(3))
    np.testing.assert_array_equal(y, 0.0)


@pytest.mark.parametrize("a", [1e-3, 0.5, 7.0, 1e4])
def test_layer_norm_symmetric_pair(a):
    y, _ = layer_norm(np.array([-a, a]), np.ones(2), np.zeros(2), eps=0.0)
    np.testing.assert_allclose(y, [-1.0, 1.0], atol=1e-12)


def test_layer_norm_hand_value():
    y, _ = layer_norm(np.array([1.0, 2.0, 3.0]), np.ones(3), np.zeros(3), eps=0.0)
    r = np.sqrt(1.5)
    np.testing.assert_allclose(y, [-r, 0.0, r], atol=1e-12)
    np.testing.assert_allclose(y, [-1.22474, 0.0, 1.22474], atol=5e-6)


def test_layer_norm_zero_axis_errors():
    with pytest.raises(ValueError):
        layer_norm(np.zeros((2, 0)), np.zeros(0), np.zeros(0))


@given(finite_arrays((4, 6), -100, 100))
def test_layer_norm_moments(x):
    y, _ = layer_norm(x, np.ones(6), np.zeros(6), eps=1e-12)
    spread = np.ptp(x, axis=-1) > 1e-3   # constant rows only carry rounding residue
    np.testing.assert_allclose(y[spread].mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y[spread].var(axis=-1), 1.0, atol=1e-6)


# ---- attention --------------------------------------------------------------

def test_attention_single_key_returns_value():
    rng = make_rng(1)
    V = rng.normal(size=(1, 3))
    out, w = scaled_dot_attention(rng.normal(size=(4, 2)), rng.normal(size=(1, 2)), V)
    np.testing.assert_array_equal(out, np.repeat(V, 4, axis=0))
    np.testing.assert_array_equal(w, 1.0)


def test_attention_orthogonal_query_identical_values():
    v = np.array([0.3, -1.2])
    out, _ = scaled_dot_attention(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, -2.0]]),
                                  np.stack([v, v]))
    np.testing.assert_allclose(out[0], v, atol=1e-15)


def test_attention_peaked_weights_against_mpmath():
    out, w = scaled_dot_attention(np.array([[10.0, 0.0]]), np.array([[10.0, 0.0], [0.0, 10.0]]),
                                  np.eye(2))
    mpmath.mp.dps = 40
    wexact = mpmath.exp(-100 / mpmath.sqrt(2)) / (1 + mpmath.exp(-100 / mpmath.sqrt(2)))
    assert abs(out[0, 1] - float(wexact)) <= 1e-20
    assert abs(out[0, 0] - (1 - float(wexact))) <= 1e-20
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_errors():
    with pytest.raises(ValueError):
        scaled_dot_attention(np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        scaled_dot_attention(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((2, 1)))


@given(st.integers(0, 10_000))
def test_attention_rows_sum_to_one(seed):
    rng = make_rng(seed)
    _, w = scaled_dot_attention(rng.normal(size=(2, 5, 3)) * 3, rng.normal(size=(2, 7, 3)) * 3,
                                rng.normal(size=(2, 7, 4)))
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


# ---- cosine similarity ------------------------------------------------------

def test_cosine_examples():
    a = np.array([0.3, -2.0, 1.0])
    assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    assert cosine_similarity(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(0.70711, abs=5e-6)


def test_cosine_zero_vector_is_finite():
    assert cosine_similarity(np.zeros(3), np.ones(3)) == 0.0


@given(finite_arrays(4, -10, 10), st.floats(1e-3, 1e3))
def test_cosine_positive_scaling(a, lam):
    if lam * np.dot(a, a) < 1e-6:      # below the eps floor the denominator is clamped
        return
    assert abs(cosine_similarity(a, lam * a) - 1.0) <= 1e-12


@given(finite_arrays((3, 4)), finite_arrays((3, 4)))
def test_cosine_bounded(a, b):
    c = cosine_similarity(a, b)
    assert np.all(np.abs(c) <= 1.0 + 1e-12)


# ---- finite differences -----------------------------------------------------

def test_fd_quadratic_linear_bilinear():
    g = finite_difference_gradient(lambda x: 0.5 * np.sum(x * x), np.array([3.0, 4.0]))
    np.testing.assert_allclose(g, [3.0, 4.0], atol=1e-9)
    x = make_rng(2).normal(size=5)
    np.testing.assert_allclose(finite_difference_gradient(np.sum, x), 1.0, atol=1e-9)
    g = finite_difference_gradient(lambda x: x[0] * x[1], np.array([2.0, 5.0]))
    np.testing.assert_allclose(g, [5.0, 2.0], atol=1e-9)


def test_fd_errors():
    with pytest.raises(ValueError):
        finite_difference_gradient(np.sum, np.zeros(2), h=0.0)
    with pytest.raises(NumericalError):
        finite_difference_gradient(lambda x: np.inf, np.zeros(2))


def test_fd_does_not_mutate_input():
    x = np.array([1.0, 2.0])
    finite_difference_gradient(lambda v: np.sum(v**3), x)
    np.testing.assert_array_equal(x, [1.0, 2.0])


def test_relative_error_scale():
    assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert relative_error([2.0], [1.0]) == pytest.approx(0.5)
    assert relative_error([0.0], [0.0]) == 0.0


# ---- rng --------------------------------------------------------------------

def test_rng_reproducible_and_platform_stable():
    a = make_rng(42).random(4)
    b = make_rng(42).random(4)
    np.testing.assert_array_equal(a, b)
    # Philox is counter-based: a seed's first draws are fixed constants on every platform
    assert make_rng(0).integers(0, 2**32, 3).tolist() == [582496169, 60417458, 4027530181]
    assert make_rng(7).random() == 0.46881748695593284
    assert not np.array_equal(make_rng(1).random(4), a)


def test_spawned_streams_are_independent_and_reproducible():
    r1, r2 = make_rng(5), make_rng(5)
    c1, c2 = spawn_rng(r1), spawn_rng(r2)
    np.testing.assert_array_equal(c1.random(3), c2.random(3))
    assert not np.array_equal(spawn_rng(r1).random(3), c1.random(3))
