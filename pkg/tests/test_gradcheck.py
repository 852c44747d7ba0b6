import numpy as np
import pytest

from gaussocc.gradcheck import (E2E_TOL, OP_CASES, OP_TOL, Problem, check_case, check_end_to_end,
                                check_problem)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name, seed):
    r = check_case(name, seed, OP_TOL)
    assert r.ok, (r.worst, r.errors)


@pytest.mark.parametrize("seed", [0, 1])
def test_end_to_end_gradient(seed):
    r = check_end_to_end(seed, E2E_TOL)
    assert r.ok, r.errors["all_parameters"]


def test_checker_flags_a_wrong_gradient():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    x0 = {"x": np.array([0.3, -0.7])}
    right = Problem(x0, lambda v: 0.5 * v["x"] @ A @ v["x"], lambda v: {"x": A @ v["x"]})
    wrong = Problem(x0, right.loss, lambda v: {"x": A @ v["x"] * (1 + 1e-4)})
    assert check_problem("quad", 0, right, OP_TOL).ok
    bad = check_problem("quad", 0, wrong, OP_TOL)
    assert not bad.ok and bad.worst == pytest.approx(1e-4, rel=1e-3)
