"""Fixed-step ODE integration with three gradient paths.

An ``rhs`` object exposes ``f(z, s) -> dz/ds`` and, for gradients,
``vjp(z, s, a) -> (a^T df/dz, a^T df/dparams or None)``. Steppers wrap an rhs
into a discrete step map with its exact reverse-mode VJP; junction maps (box
entry/exit) and exact emission-absorption steps implement the same
``step``/``vjp`` protocol so whole mixed traces can be recorded and replayed.

* ``backprop_recorded`` differentiates a stored trajectory (memory linear in
  the step count).
* ``integrate_adjoint`` keeps only the current state: it reconstructs each
  earlier state by inverting the step map and applies the same step VJP,
  so its result coincides with the recorded path up to the inversion
  tolerance.
* ``finite_diff_grad`` is the central-difference oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SolverError(FloatingPointError):
    pass


@dataclass
class SolverConfig:
    method: str = "rk4"
    step_count: int = 128
    record_trajectory: bool = False

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.step_count < 1:
            raise ValueError("step_count must be >= 1")


def _check(z, where):
    if not np.all(np.isfinite(z)):
        raise SolverError(f"non-finite state in {where}")
    return z


def add_grads(g, h):
    if h is None:
        return g
    if g is None:
        return np.array(h, dtype=np.float64, copy=True)
    return g + h


class EulerStepper:
    def __init__(self, rhs):
        self.rhs = rhs

    def step(self, z, s, h):
        return _check(z + h * self.rhs.f(z, s), "euler step")

    def vjp(self, z, s, h, a):
        az, g = self.rhs.vjp(z, s, h * a)
        return a + az, g


class RK4Stepper:
    def __init__(self, rhs):
        self.rhs = rhs

    def _stages(self, z, s, h):
        f = self.rhs.f
        k1 = f(z, s)
        z1 = z + 0.5 * h * k1
        k2 = f(z1, s + 0.5 * h)
        z2 = z + 0.5 * h * k2
        k3 = f(z2, s + 0.5 * h)
        z3 = z + h * k3
        k4 = f(z3, s + h)
        return (k1, k2, k3, k4), (z, z1, z2, z3)

    def step(self, z, s, h):
        (k1, k2, k3, k4), _ = self._stages(z, s, h)
        return _check(z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), "rk4 stage")

    def vjp(self, z, s, h, a):
        _, (z0, z1, z2, z3) = self._stages(z, s, h)
        kb1, kb2, kb3, kb4 = h / 6 * a, h / 3 * a, h / 3 * a, h / 6 * a
        az = a.copy()
        g = None
        t, gp = self.rhs.vjp(z3, s + h, kb4)
        az += t
        g = add_grads(g, gp)
        kb3 = kb3 + h * t
        t, gp = self.rhs.vjp(z2, s + 0.5 * h, kb3)
        az += t
        g = add_grads(g, gp)
        kb2 = kb2 + 0.5 * h * t
        t, gp = self.rhs.vjp(z1, s + 0.5 * h, kb2)
        az += t
        g = add_grads(g, gp)
        kb1 = kb1 + 0.5 * h * t
        t, gp = self.rhs.vjp(z0, s, kb1)
        az += t
        g = add_grads(g, gp)
        return az, g


def make_stepper(rhs, method):
    return RK4Stepper(rhs) if method == "rk4" else EulerStepper(rhs)


@dataclass
class StepRecord:
    stepper: object
    s: float
    h: float
    z: np.ndarray  # state before the step


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    final: np.ndarray | None = None

    def states(self) -> np.ndarray:
        return np.array([r.z for r in self.steps] + [self.final])

    def append(self, stepper, s, h, z):
        self.steps.append(StepRecord(stepper, float(s), float(h), np.array(z, copy=True)))


def integrate(rhs, z0, s0, s1, config: SolverConfig = SolverConfig(), trajectory=None):
    """Fixed-step solve of dz/ds = rhs.f(z, s) from s0 to s1.

    Returns z1, or (z1, Trajectory) when ``config.record_trajectory`` is set
    (an existing trajectory may be passed to append to).
    """
    if not s1 > s0:
        raise ValueError("integrate needs s1 > s0")
    stepper = make_stepper(rhs, config.method)
    h = (s1 - s0) / config.step_count
    z = np.array(z0, dtype=np.float64, copy=True)
    record = config.record_trajectory
    if record and trajectory is None:
        trajectory = Trajectory()
    for i in range(config.step_count):
        s = s0 + i * h
        if record:
            trajectory.append(stepper, s, h, z)
        z = stepper.step(z, s, h)
    if record:
        trajectory.final = z.copy()
        return z, trajectory
    return z


def backprop_recorded(trajectory: Trajectory, seed):
    """Reverse-mode through a stored trajectory. Returns (a0, param_grads)."""
    a = np.array(seed, dtype=np.float64, copy=True)
    g = None
    for r in reversed(trajectory.steps):
        a, gp = r.stepper.vjp(r.z, r.s, r.h, a)
        g = add_grads(g, gp)
    return a, g


def invert_step(stepper, z_next, s, h, iters=3):
    """Solve stepper.step(z, s, h) = z_next for z (backward step + fixed point)."""
    z = stepper.step(z_next, s + h, -h)
    for _ in range(iters):
        z = z + (z_next - stepper.step(z, s, h))
    return z


def integrate_adjoint(rhs, z1, seed_a1, s0, s1, config: SolverConfig = SolverConfig(),
                      inv_iters=3):
    """Constant-memory reverse pass: replays the state backwards with the co-state.

    Returns (a0, param_grads, z0_replayed).
    """
    stepper = make_stepper(rhs, config.method)
    h = (s1 - s0) / config.step_count
    z = np.array(z1, dtype=np.float64, copy=True)
    a = np.array(seed_a1, dtype=np.float64, copy=True)
    g = None
    for i in range(config.step_count - 1, -1, -1):
        s = s0 + i * h
        z = _check(invert_step(stepper, z, s, h, inv_iters), "adjoint replay")
        a, gp = stepper.vjp(z, s, h, a)
        _check(a, "adjoint co-state")
        g = add_grads(g, gp)
    return a, g, z


def finite_diff_grad(loss_fn, params, eps=1e-4):
    """Central differences of a scalar loss over every entry of params."""
    p = np.array(params, dtype=np.float64, copy=True)
    flat = p.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = loss_fn(p)
        flat[i] = old - eps
        fm = loss_fn(p)
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g.reshape(p.shape)


class LinearRHS:
    """dz/ds = A z, used in tests and as a minimal example of the rhs protocol."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=np.float64)

    def f(self, z, s):
        return z @ self.A.T

    def vjp(self, z, s, a):
        return self.A.T @ a, None
