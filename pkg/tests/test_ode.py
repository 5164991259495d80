import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stcvit.ode import DivergenceError, OdeProblem, estimate_order, integrate, integrate_adaptive
from stcvit.tensor import Tensor, backward, grad_check


def identity_field(h, t):
    return h


def test_zero_field_is_exact(f64):
    h0 = Tensor(np.array([1.0, -2.0, 3.5]))
    out = integrate(OdeProblem(lambda h, t: h.scale(0.0), steps=7), h0)
    np.testing.assert_array_equal(out.data, h0.data)


def test_rk4_reproduces_e(f64):
    out = integrate(OdeProblem(identity_field, 0.0, 1.0, 10, "rk4"), Tensor([1.0]))
    assert abs(out.data[0] - math.e) < 1e-5


def test_euler_matches_closed_form_recurrence(f64):
    out = integrate(OdeProblem(identity_field, 0.0, 1.0, 10, "euler"), Tensor([1.0]))
    assert out.data[0] == pytest.approx(1.1**10, abs=1e-12)
    assert out.data[0] == pytest.approx(2.5937, abs=1e-4)


def test_orders():
    exact = lambda t: np.array([math.exp(t)])  # noqa: E731
    assert abs(estimate_order("rk4", identity_field, [1.0], exact) - 4.0) <= 0.5
    assert abs(estimate_order("euler", identity_field, [1.0], exact) - 1.0) <= 0.2
    assert estimate_order("rk4", lambda h, t: h.scale(0.0), [1.0], lambda t: np.array([1.0])) == math.inf


@pytest.mark.parametrize("seed", range(5))
def test_linear_system_matches_matrix_exponential(seed, f64):
    r = np.random.default_rng(seed)
    a = r.normal(size=(3, 3))
    a *= 0.9 / np.max(np.abs(np.linalg.eigvals(a)))
    h0 = r.normal(size=3)
    # truncated exponential series, far beyond the tolerance
    expm, term = np.eye(3), np.eye(3)
    for k in range(1, 40):
        term = term @ a / k
        expm = expm + term
    out = integrate(OdeProblem(lambda h, t: h @ Tensor(a.T), steps=32), Tensor(h0[None]))
    np.testing.assert_allclose(out.data[0], expm @ h0, atol=1e-6)


def test_gradient_through_unrolled_solver(f64):
    theta = Tensor(np.array([0.7]), requires_grad=True)
    h0 = Tensor(np.array([1.3, -0.4]), requires_grad=True)

    def f(theta, h0):
        field = lambda h, t: (h * theta).tanh()  # noqa: E731
        return (integrate(OdeProblem(field, steps=4), h0) ** 2).sum()

    rep = grad_check(f, [theta, h0], 1e-5, 1e-4)
    assert rep.passed, rep.max_rel_error


def test_divergence_reports_step(f64):
    with pytest.raises(DivergenceError) as err, np.errstate(over="ignore"):
        integrate(OdeProblem(lambda h, t: (h * h).exp(), steps=6, method="euler"), Tensor([3.0]))
    assert err.value.step >= 1
    with pytest.raises(DivergenceError) as err:
        integrate(OdeProblem(identity_field), Tensor([np.nan]))
    assert err.value.step == 0


@pytest.mark.parametrize("kwargs", [dict(steps=0), dict(t0=1.0, t1=1.0), dict(method="rk45")])
def test_problem_validation(kwargs):
    with pytest.raises(ValueError):
        OdeProblem(identity_field, **kwargs)


def test_adaptive_solver_tolerance(f64):
    out, n = integrate_adaptive(identity_field, Tensor([1.0]), 0.0, 1.0, rtol=1e-6, atol=1e-8)
    assert abs(out.data[0] - math.e) < 1e-5
    assert n >= 1


@given(st.floats(-2.0, 2.0), st.integers(1, 6))
def test_rk4_exact_on_cubic_time_polynomials(c, steps):
    # RK4 integrates dh/dt = polynomial of degree <= 3 in t exactly
    field = lambda h, t: Tensor(np.array([c * t**3 - t + 1.0]))  # noqa: E731
    out = integrate(OdeProblem(field, 0.0, 1.0, steps), Tensor(np.array([0.0])))
    assert out.data[0] == pytest.approx(c / 4 - 0.5 + 1.0, abs=1e-5)


def test_backward_through_solver_reaches_initial_state(f64):
    h0 = Tensor(np.array([2.0]), requires_grad=True)
    backward(integrate(OdeProblem(identity_field, steps=10), h0).sum())
    # d/dh0 of the RK4 map equals its own growth factor
    assert h0.grad[0] == pytest.approx((1 + 0.1 + 0.1**2 / 2 + 0.1**3 / 6 + 0.1**4 / 24) ** 10, rel=1e-12)
