# experiments/dynamics.py
"""
Benchmark control systems, closed-loop simulation, linearization and LQR.

System right-hand sides are written against the diffcore helpers, so the
same function integrates numpy batches and is traced on a tape when a
Lyapunov derivative has to be differentiated through the dynamics.
"""

import enum
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional

import numpy as np
from scipy.optimize import brentq

from networks import diffcore as dc
from networks.diffcore import Node
from networks.exceptions import DimensionError, NumericFault, SolverError

logger = logging.getLogger(__name__)

EQ9_SMOOTHING = 0.02
EQ13_INPUT_LIMIT = 5.0

DEFAULT_DT = 0.01
DEFAULT_T_MAX = 20.0
DEFAULT_CONV_TOL = 1e-3
# convergence needs the state to stay inside the tolerance ball this long
CONVERGENCE_HOLD = 1.0


@dataclass(frozen=True)
class Box:
    """
    Open axis-aligned box (low, high)
    """
    low: tuple
    high: tuple

    def __post_init__(self):
        low = tuple(float(v) for v in self.low)
        high = tuple(float(v) for v in self.high)
        if len(low) != len(high) or any(lo >= hi for lo, hi in zip(low, high)):
            raise DimensionError(f"invalid box {low} .. {high}")
        object.__setattr__(self, 'low', low)
        object.__setattr__(self, 'high', high)

    @classmethod
    def symmetric(cls, half_width, dim):
        return cls((-half_width,) * dim, (half_width,) * dim)

    @property
    def dim(self):
        return len(self.low)

    @property
    def lower(self):
        return np.array(self.low)

    @property
    def upper(self):
        return np.array(self.high)

    @property
    def half_widths(self):
        return (self.upper - self.lower) / 2.0

    def contains(self, x):
        """Row-wise membership of the open box."""
        x = np.atleast_2d(x)
        return np.all((x > self.lower) & (x < self.upper), axis=1)

    def to_dict(self):
        return {'low': list(self.low), 'high': list(self.high)}


@dataclass(frozen=True)
class DynSystem:
    """
    x' = f(x, u) on a box domain; ``field`` takes (batch, m) and (batch, n)
    arrays or tape nodes and returns (batch, m)
    """
    name: str
    state_dim: int
    input_dim: int
    domain: Box
    field: Callable = field(compare=False, repr=False)
    input_limit: Optional[float] = None
    description: str = ''

    def rhs(self, x, u):
        """f(x, u) for one state or a batch of states (numpy)."""
        single = np.ndim(x) == 1
        x = dc._as_batch(x, self.state_dim)
        u = dc._as_batch(u, self.input_dim)
        if x.shape[0] != u.shape[0]:
            raise DimensionError(f"{x.shape[0]} states but {u.shape[0]} inputs")
        out = np.asarray(self.field(x, u), dtype=np.float64)
        return out[0].copy() if single else out

    def trace_rhs(self, x: Node, u: Node) -> Node:
        return self.field(x, u)

    def closed_loop(self, controller):
        """x -> f(x, controller(x)) on numpy batches."""
        def rhs(x):
            return self.rhs(x, controller(x))
        return rhs

    def phase_field(self, controller, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self.rhs(points, controller(points))


def g_smooth(x1, k=EQ9_SMOOTHING):
    """C1 smooth |x1|: (k/2)(x1/k)^2 inside |x1| < k, |x1| - k/2 outside."""
    if not k > 0:
        raise ValueError("smoothing width k must be positive")
    return dc.huber(x1, k)


def _eq9_field(x, u):
    x1, x2 = x[:, 0:1], x[:, 1:2]
    u1, u2 = u[:, 0:1], u[:, 1:2]
    coupling = 20.0 * dc.exp(-2.0 * (x1 * x1) - 0.5 * (x2 * x2)) - 10.0
    dx2 = (0.5 * dc.sin(math.pi * x1) + coupling * u1
           + 50.0 * (g_smooth(x1) * u2) - 0.1 * u2)
    return dc.concat_cols([x2, dx2])


def _eq13_field(x, u_raw):
    x1, x2 = x[:, 0:1], x[:, 1:2]
    u = EQ13_INPUT_LIMIT * dc.tanh(u_raw)
    u1, u2 = u[:, 0:1], u[:, 1:2]
    coupling = 10.0 * dc.exp(-2.0 * (x1 * x1) - 2.0 * (x2 * x2)) - 5.0
    dx2 = 0.5 * dc.sin(math.pi * x1) + coupling * u1 + 2.0 * u2
    return dc.concat_cols([x2, dx2])


@lru_cache(maxsize=None)
def spurious_roots():
    """
    The two smallest positive roots of d/dx [x^2 + sin^2(pi x)] = 2x + pi sin(2 pi x).
    """
    derivative = lambda x: 2.0 * x + math.pi * math.sin(2.0 * math.pi * x)
    return (brentq(derivative, 0.55, 0.60, xtol=1e-14),
            brentq(derivative, 0.90, 0.95, xtol=1e-14))


def _spurious_field(x, u):
    p, q = spurious_roots()
    return u - x * ((x - p) * (x - q))


def system_eq9(x, u):
    return EQ9.rhs(x, u)


def system_eq13(x, u_raw):
    return EQ13.rhs(x, u_raw)


EQ9 = DynSystem(
    name='eq9',
    state_dim=2,
    input_dim=2,
    domain=Box.symmetric(1.0, 2),
    field=_eq9_field,
    description="two-input system with a smooth |x1| gate on the second input",
)

EQ13 = DynSystem(
    name='eq13',
    state_dim=2,
    input_dim=2,
    domain=Box.symmetric(1.0, 2),
    field=_eq13_field,
    input_limit=EQ13_INPUT_LIMIT,
    description="two-input system with inputs saturated to (-5, 5) by 5 tanh(u)",
)

SCALAR_SPURIOUS = DynSystem(
    name='scalar-spurious',
    state_dim=1,
    input_dim=1,
    domain=Box.symmetric(1.5, 1),
    field=_spurious_field,
    description="x' = u - x (x - P)(x - Q), stalls at P and Q when u = 0",
)

SYSTEMS = {system.name: system for system in (EQ9, EQ13, SCALAR_SPURIOUS)}


def get_system(name) -> DynSystem:
    try:
        return SYSTEMS[name]
    except KeyError:
        raise DimensionError(f"unknown system '{name}'") from None


# Integration

class Termination(str, enum.Enum):
    CONVERGED = 'converged'
    ESCAPED = 'escaped'
    TIMED_OUT = 'timed-out'


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    termination: Termination

    def __len__(self):
        return self.times.size

    @property
    def final_state(self):
        return self.states[-1]

    @property
    def final_time(self):
        return float(self.times[-1])


def rk4_step(rhs_closed, x, dt):
    """One classical Runge-Kutta step of x' = rhs_closed(x)."""
    if not dt > 0:
        raise ValueError("time step must be positive")
    x = np.asarray(x, dtype=np.float64)
    k1 = rhs_closed(x)
    k2 = rhs_closed(x + 0.5 * dt * k1)
    k3 = rhs_closed(x + 0.5 * dt * k2)
    k4 = rhs_closed(x + dt * k3)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NumericFault('rk4', "integration produced a non-finite state")
    return x_next


def simulate_many(system: DynSystem, controller, x0s, dt=DEFAULT_DT, t_max=DEFAULT_T_MAX,
                  conv_tol=DEFAULT_CONV_TOL) -> List[Trajectory]:
    """
    Roll out every initial state in ``x0s`` together.

    A row stops when it has stayed within ``conv_tol`` of the origin for one
    second of model time (converged), when it leaves the open domain box
    (escaped, the outside state is kept as the last sample), or at
    ``t_max`` (timed-out).
    """
    if not dt > 0:
        raise ValueError("time step must be positive")
    x0s = dc._as_batch(x0s, system.state_dim)
    rows = x0s.shape[0]
    n_steps = int(round(t_max / dt))
    hold = int(round(CONVERGENCE_HOLD / dt))
    closed = system.closed_loop(controller)

    states = [[x0s[i].copy()] for i in range(rows)]
    inputs = [[] for _ in range(rows)]
    outcome: List[Optional[Termination]] = [None] * rows
    streak = np.zeros(rows, dtype=int)

    def settle(active_idx, current):
        inside = system.domain.contains(current)
        small = np.linalg.norm(current, axis=1) < conv_tol
        for pos, i in enumerate(active_idx):
            if not inside[pos]:
                outcome[i] = Termination.ESCAPED
                continue
            streak[i] = streak[i] + 1 if small[pos] else 0
            if streak[i] > hold:
                outcome[i] = Termination.CONVERGED

    active = np.arange(rows)
    current = x0s.copy()
    settle(active, current)
    for _ in range(n_steps):
        keep = np.array([outcome[i] is None for i in active], dtype=bool)
        active, current = active[keep], current[keep]
        if active.size == 0:
            break
        u = np.atleast_2d(controller(current))
        for pos, i in enumerate(active):
            inputs[i].append(u[pos].copy())
        current = rk4_step(closed, current, dt)
        for pos, i in enumerate(active):
            states[i].append(current[pos].copy())
        settle(active, current)

    trajectories = []
    for i in range(rows):
        path = np.array(states[i])
        final_input = np.atleast_1d(controller(path[-1]))
        recorded = np.array(inputs[i] + [final_input]).reshape(len(path), system.input_dim)
        trajectories.append(Trajectory(
            times=dt * np.arange(len(path)),
            states=path,
            inputs=recorded,
            termination=outcome[i] or Termination.TIMED_OUT,
        ))
    return trajectories


def simulate(system: DynSystem, controller, x0, dt=DEFAULT_DT, t_max=DEFAULT_T_MAX,
             conv_tol=DEFAULT_CONV_TOL) -> Trajectory:
    (trajectory,) = simulate_many(system, controller, np.atleast_2d(x0), dt, t_max, conv_tol)
    return trajectory


# Linearization and LQR

@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise DimensionError(f"incompatible A {A.shape} and B {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise NumericFault('linearization', "A and B must be finite")
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'B', B)


def linearize(system: DynSystem, h=1e-5) -> LinearModel:
    """Central-difference Jacobians of f at (0, 0)."""
    if not h > 0:
        raise ValueError("difference step must be positive")
    m, n = system.state_dim, system.input_dim
    eye_x, eye_u = np.eye(m), np.eye(n)
    xs = np.vstack([h * eye_x, -h * eye_x, np.zeros((2 * n, m))])
    us = np.vstack([np.zeros((2 * m, n)), h * eye_u, -h * eye_u])
    f = system.rhs(xs, us)
    A = (f[:m] - f[m:2 * m]).T / (2.0 * h)
    B = (f[2 * m:2 * m + n] - f[2 * m + n:]).T / (2.0 * h)
    return LinearModel(A, B)


def is_hurwitz(matrix):
    return bool(np.max(np.linalg.eigvals(matrix).real) < 0.0)


def solve_lyapunov(F, M):
    """
    X with F X + X F^T = M, via the Kronecker form (I (x) F + F (x) I) vec(X) = vec(M).
    """
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    size = F.shape[0]
    eye = np.eye(size)
    operator = np.kron(eye, F) + np.kron(F, eye)
    try:
        vec = np.linalg.solve(operator, M.reshape(-1, order='F'))
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"Lyapunov equation is singular: {exc}") from None
    X = vec.reshape(size, size, order='F')
    return 0.5 * (X + X.T)


def care_residual(model: LinearModel, P, Q, R):
    A, B = model.A, model.B
    residual = A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q
    return float(np.linalg.norm(residual, 'fro'))


GAIN_SCALES = (0.0, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1e3, 3e3, 1e4)
SHIFT_SCALES = (1.0, 2.0, 5.0, 10.0, 100.0)


def initial_stabilizing_gain(model: LinearModel):
    """
    A gain K0 with A - B K0 Hurwitz.

    Tries K = c B^T for increasing c first. When no multiple of B^T works
    (e.g. when a single input direction drives a saddle) it falls back to
    a pole-shift: solve (A + lam I) Z + Z (A + lam I)^T = 2 B B^T and use
    K = B^T Z^-1, which is stabilizing for controllable (A, B).
    """
    A, B = model.A, model.B
    for c in GAIN_SCALES:
        K = c * B.T
        if is_hurwitz(A - B @ K):
            logger.debug("initial gain c * B^T with c=%g", c)
            return K
    base = max(1.0, float(np.linalg.norm(A, 2)))
    eye = np.eye(A.shape[0])
    for factor in SHIFT_SCALES:
        shifted = A + factor * base * eye
        try:
            Z = solve_lyapunov(shifted, 2.0 * B @ B.T)
            K = B.T @ np.linalg.inv(Z)
        except (SolverError, np.linalg.LinAlgError):
            continue
        if np.all(np.isfinite(K)) and is_hurwitz(A - B @ K):
            logger.debug("initial gain from pole shift %g", factor * base)
            return K
    raise SolverError("no stabilizing initial gain found; is (A, B) stabilizable?")


def lqr_gain(model: LinearModel, Q=None, R=None, tol=1e-10, max_iter=100):
    """
    Continuous-time LQR by Kleinman iteration.

    Returns (K, P) with P the stabilizing solution of
    A^T P + P A - P B R^-1 B^T P + Q = 0 and K = R^-1 B^T P.
    """
    A, B = model.A, model.B
    m, n = B.shape
    Q = np.eye(m) if Q is None else np.atleast_2d(np.asarray(Q, dtype=np.float64))
    R = np.eye(n) if R is None else np.atleast_2d(np.asarray(R, dtype=np.float64))
    for name, matrix in (('Q', Q), ('R', R)):
        if not np.allclose(matrix, matrix.T) or np.min(np.linalg.eigvalsh(matrix)) <= 0:
            raise SolverError(f"{name} must be symmetric positive definite")

    K = initial_stabilizing_gain(model)
    for iteration in range(1, max_iter + 1):
        closed = A - B @ K
        P = solve_lyapunov(closed.T, -(Q + K.T @ R @ K))
        K = np.linalg.solve(R, B.T @ P)
        residual = care_residual(model, P, Q, R)
        if residual < tol:
            logger.debug("Kleinman iteration converged in %d steps (residual %.3e)", iteration, residual)
            if not is_hurwitz(A - B @ K):
                raise SolverError("LQR gain does not stabilize the linear model")
            return K, P
    raise SolverError(f"Kleinman iteration did not converge in {max_iter} steps (residual {residual:.3e})")
