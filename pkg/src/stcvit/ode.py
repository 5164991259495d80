"""Fixed-step ODE solvers that run on the gradient tape.

Integration is unrolled: each solver step is made of ordinary tensor ops, so
``backward`` differentiates the discrete computation exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad

METHODS = ("euler", "rk4")

VectorField = Callable[[Tensor, float], Tensor]


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"ODE state became non-finite at step {step}")


@dataclass
class OdeProblem:
    vector_field: VectorField
    t0: float = 0.0
    t1: float = 1.0
    steps: int = 2
    method: str = "rk4"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.t1 > self.t0:
            raise ValueError(f"need t1 > t0, got t0={self.t0}, t1={self.t1}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")


def _euler_step(f: VectorField, h: Tensor, t: float, dt: float) -> Tensor:
    return h + f(h, t).scale(dt)


def _rk4_step(f: VectorField, h: Tensor, t: float, dt: float) -> Tensor:
    k1 = f(h, t)
    k2 = f(h + k1.scale(dt / 2), t + dt / 2)
    k3 = f(h + k2.scale(dt / 2), t + dt / 2)
    k4 = f(h + k3.scale(dt), t + dt)
    return h + (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(dt / 6)


_STEPPERS = {"euler": _euler_step, "rk4": _rk4_step}


def integrate(problem: OdeProblem, h0: Tensor) -> Tensor:
    """Integrate ``dh/dt = f(h, t)`` from ``t0`` to ``t1`` with a fixed step."""
    if not np.all(np.isfinite(h0.data)):
        raise DivergenceError(0, "initial state is not finite")
    stepper = _STEPPERS[problem.method]
    dt = (problem.t1 - problem.t0) / problem.steps
    h = h0
    for i in range(problem.steps):
        t = problem.t0 + i * dt
        h = stepper(problem.vector_field, h, t, dt)
        if not np.all(np.isfinite(h.data)):
            raise DivergenceError(i + 1)
    return h


# Dormand-Prince 5(4) tableau
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


def integrate_adaptive(
    f: VectorField,
    h0: Tensor,
    t0: float = 0.0,
    t1: float = 1.0,
    rtol: float = 1e-3,
    atol: float = 1e-3,
    max_steps: int = 10_000,
) -> tuple[Tensor, int]:
    """Adaptive RK45 for evaluation only (no gradient is recorded).

    Returns the final state and the number of accepted steps.
    """
    with no_grad():
        h = h0.data.astype(np.float64)
        t = t0
        dt = (t1 - t0) / 4
        accepted = 0
        for _ in range(max_steps):
            if t >= t1:
                break
            dt = min(dt, t1 - t)
            k = []
            for c, a in zip(_DP_C, _DP_A):
                hs = h + dt * sum(ai * ki for ai, ki in zip(a, k)) if k else h
                k.append(np.asarray(f(Tensor(hs, dtype=h0.dtype), t + c * dt).data, dtype=np.float64))
            y5 = h + dt * sum(b * ki for b, ki in zip(_DP_B5, k))
            y4 = h + dt * sum(b * ki for b, ki in zip(_DP_B4, k))
            scale = atol + rtol * np.maximum(np.abs(h), np.abs(y5))
            err = float(np.sqrt(np.mean(((y5 - y4) / scale) ** 2)))
            if not math.isfinite(err):
                raise DivergenceError(accepted + 1)
            if err <= 1.0:
                h, t = y5, t + dt
                accepted += 1
            dt *= min(5.0, max(0.2, 0.9 * (err if err > 0 else 1e-10) ** -0.2))
        else:
            raise RuntimeError(f"adaptive solver exceeded {max_steps} steps")
    return Tensor(h, dtype=h0.dtype), accepted


def estimate_order(
    method: str,
    f: VectorField,
    h0,
    analytic_solution: Callable[[float], np.ndarray],
    t0: float = 0.0,
    t1: float = 1.0,
) -> float:
    """Empirical convergence order from step halving.

    Averages ``log2(err(n) / err(2n))`` over ``n`` in {8, 16, 32}.  Returns
    ``math.inf`` when the solver is exact at every resolution.
    """
    exact = np.asarray(analytic_solution(t1), dtype=np.float64)
    errors = []
    with no_grad():
        start = Tensor(h0, dtype=np.float64)
        for n in (8, 16, 32, 64):
            out = integrate(OdeProblem(f, t0, t1, n, method), start)
            errors.append(float(np.max(np.abs(out.data - exact))))
    if all(e == 0.0 for e in errors):
        return math.inf
    orders = []
    for coarse, fine in zip(errors[:-1], errors[1:]):
        if fine == 0.0:
            return math.inf
        orders.append(math.log2(coarse / fine))
    return float(np.mean(orders))
