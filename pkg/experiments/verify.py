# experiments/verify.py
"""
Numerical checks of the Lyapunov conditions.

Grid scans are split into fixed-size chunks and run on a thread pool; the
chunks are reassembled in index order so results do not depend on the
number of workers.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.optimize import brentq

from networks import diffcore as dc
from networks.nets import BoundNet, FieldNet

from .dynamics import (DEFAULT_CONV_TOL, DEFAULT_DT, DEFAULT_T_MAX, Box, DynSystem, Termination,
                       simulate_many)
from .exceptions import RangeError
from .train import sample_uniform_box, vdot

logger = logging.getLogger(__name__)

CHUNK_SIZE = 256
DEFAULT_GRID = 41
DEFAULT_TOL = 1e-6
MERGE_RADIUS = 1e-2
EXCLUSION_RADIUS = 0.05
ORIGIN_RADIUS = 1e-3
MAX_DESCENT_STEPS = 100
MAX_BACKTRACKS = 30
ARMIJO = 1e-4


def worker_count():
    from django.conf import settings

    threads = getattr(settings, 'LYAPFORGE_THREADS', 0) if settings.configured else 0
    if threads < 0:
        raise RangeError("LYAPFORGE_THREADS", "must be >= 0")
    return threads or os.cpu_count() or 1


def map_chunks(fn, rows: np.ndarray, chunk_size=CHUNK_SIZE) -> list:
    """fn applied to consecutive row chunks; results in chunk order."""
    chunks = [rows[i:i + chunk_size] for i in range(0, len(rows), chunk_size)]
    if len(chunks) <= 1:
        return [fn(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=min(worker_count(), len(chunks))) as pool:
        return list(pool.map(fn, chunks))


def as_bound(V):
    if isinstance(V, FieldNet):
        return BoundNet(V)
    return V


def cell_centres(box: Box, res) -> np.ndarray:
    """Centres of a res^m grid of equal cells, first coordinate varying slowest."""
    axes = [lo + (np.arange(res) + 0.5) * (hi - lo) / res for lo, hi in zip(box.low, box.high)]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def grid_initial_states(box: Box, res) -> np.ndarray:
    centres = cell_centres(box, res)
    return centres[np.linalg.norm(centres, axis=1) > 0.0]


def circle_initial_states(radius, count) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(count) / count
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def roa_initial_states(roa, state_dim) -> np.ndarray:
    """Initial states for a roa config section: a circle when a radius is set, else a grid."""
    if roa.circle_radius:
        return circle_initial_states(roa.circle_radius, roa.circle_count)
    return grid_initial_states(Box.symmetric(roa.half_width, state_dim), roa.grid)


# Critical points

def _gradients(bound, X):
    tape = dc.Tape()
    x = tape.variable(X)
    V = bound.trace(tape, x)
    (g,) = tape.grad(dc.sum_rows(V), [x])
    return V.value[:, 0], g.value


def _gradients_and_hessians(bound, X):
    tape = dc.Tape()
    x = tape.variable(X)
    V = bound.trace(tape, x)
    (g,) = tape.grad(dc.sum_rows(V), [x], create_graph=True)
    rows, dim = X.shape
    H = np.zeros((rows, dim, dim))
    for j in range(dim):
        (h,) = tape.grad(dc.sum_rows(g[:, j:j + 1]), [x])
        H[:, j, :] = h.value
    return g.value, H


def gradient_norms(V, points) -> np.ndarray:
    bound = as_bound(V)
    parts = map_chunks(lambda chunk: np.linalg.norm(_gradients(bound, chunk)[1], axis=1),
                       np.atleast_2d(points))
    return np.concatenate(parts) if parts else np.zeros(0)


def _descend(bound, box: Box, seeds, tol):
    """
    Damped Gauss-Newton on 0.5 ||grad V||^2 from every seed, with an Armijo
    backtracking line search that never leaves the box.
    Returns final points and gradient norms.
    """
    X = seeds.copy()
    rows, dim = X.shape
    active = np.ones(rows, dtype=bool)
    max_step = 0.25 * float(np.min(box.half_widths))

    for _ in range(MAX_DESCENT_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g, H = _gradients_and_hessians(bound, X[idx])
        gn = np.linalg.norm(g, axis=1)

        done = gn < tol
        active[idx[done]] = False
        idx, g, H, gn = idx[~done], g[~done], H[~done], gn[~done]
        if idx.size == 0:
            break

        Ht = np.transpose(H, (0, 2, 1))
        normal = Ht @ H
        mu = 1e-9 * np.maximum(np.trace(normal, axis1=1, axis2=2) / dim, 1e-12)
        slope = (Ht @ g[:, :, None])[:, :, 0]
        d = -np.linalg.solve(normal + mu[:, None, None] * np.eye(dim), slope[:, :, None])[:, :, 0]
        length = np.linalg.norm(d, axis=1)
        too_long = length > max_step
        d[too_long] *= (max_step / length[too_long])[:, None]

        phi = 0.5 * gn ** 2
        decrease = np.sum(slope * d, axis=1)
        alpha = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(MAX_BACKTRACKS):
            if not pending.any():
                break
            trial = X[idx[pending]] + alpha[pending, None] * d[pending]
            inside = box.contains(trial)
            accepted = np.zeros(trial.shape[0], dtype=bool)
            if inside.any():
                _, g_trial = _gradients(bound, trial[inside])
                phi_trial = 0.5 * np.sum(g_trial ** 2, axis=1)
                sub = np.flatnonzero(pending)[inside]
                ok = phi_trial <= phi[sub] + ARMIJO * alpha[sub] * decrease[sub]
                accepted[np.flatnonzero(inside)[ok]] = True
            moved = np.flatnonzero(pending)[accepted]
            X[idx[moved]] += alpha[moved, None] * d[moved]
            pending[moved] = False
            alpha[pending] *= 0.5
        # rows whose line search failed, or whose step vanished, have stalled
        stalled = pending | (alpha * np.linalg.norm(d, axis=1) < 1e-15)
        active[idx[stalled]] = False

    _, g = _gradients(bound, X)
    return X, np.linalg.norm(g, axis=1)


@dataclass
class CriticalPoint:
    location: np.ndarray
    grad_norm: float
    value: float
    distance: float

    def to_dict(self):
        return {'location': self.location.tolist(), 'grad_norm': self.grad_norm,
                'value': self.value, 'distance': self.distance}


@dataclass
class CriticalPointReport:
    points: List[CriticalPoint]
    grid_min_gradnorm_outside_ball: float
    grid_res: int
    tol: float
    merge_radius: float
    seeds: int = 0
    converged_seeds: int = 0

    @property
    def count(self):
        return len(self.points)

    def single_pole(self, radius=ORIGIN_RADIUS):
        """Exactly one critical point and it sits at the origin."""
        return self.count == 1 and self.points[0].distance < radius

    def to_dict(self):
        return {
            'points': [p.to_dict() for p in self.points],
            'count': self.count,
            'grid_min_gradnorm_outside_ball': self.grid_min_gradnorm_outside_ball,
            'grid_res': self.grid_res,
            'tol': self.tol,
            'merge_radius': self.merge_radius,
            'seeds': self.seeds,
            'converged_seeds': self.converged_seeds,
        }


def merge_points(points, radius=MERGE_RADIUS):
    """Keep the first of every cluster of points closer than ``radius``, in index order."""
    kept = []
    for i, p in enumerate(points):
        if all(np.linalg.norm(p - points[j]) >= radius for j in kept):
            kept.append(i)
    return kept


def find_critical_points(V, box: Box, grid_res=DEFAULT_GRID, tol=DEFAULT_TOL,
                         merge_radius=MERGE_RADIUS) -> CriticalPointReport:
    """
    Locate the points where grad V vanishes inside ``box``.

    Every grid cell centre seeds a descent on ||grad V||^2; seeds ending
    with ||grad V|| < tol are merged within ``merge_radius``.
    """
    if grid_res < 8:
        raise ValueError("grid resolution must be at least 8")
    bound = as_bound(V)
    seeds = cell_centres(box, grid_res)

    def run(chunk):
        return _descend(bound, box, chunk, tol)

    results = map_chunks(run, seeds)
    finals = np.vstack([r[0] for r in results])
    norms = np.concatenate([r[1] for r in results])
    converged = np.flatnonzero(norms < tol)
    candidates = finals[converged]
    kept = merge_points(candidates, merge_radius)

    points = []
    if kept:
        locations = candidates[kept]
        values, grads = _gradients(bound, locations)
        for loc, value, grad in zip(locations, values, grads):
            points.append(CriticalPoint(
                location=loc.copy(),
                grad_norm=float(np.linalg.norm(grad)),
                value=float(value),
                distance=float(np.linalg.norm(loc)),
            ))

    outside = seeds[np.linalg.norm(seeds, axis=1) >= EXCLUSION_RADIUS]
    grid_min = float(np.min(gradient_norms(bound, outside))) if len(outside) else float('inf')
    logger.info("critical point search: %d seeds, %d converged, %d distinct points",
                len(seeds), len(converged), len(points))
    return CriticalPointReport(points, grid_min, grid_res, tol, merge_radius,
                               seeds=len(seeds), converged_seeds=int(len(converged)))


def grid_min_gradnorm(V, box: Box, res, exclusion=EXCLUSION_RADIUS, inclusive=True):
    """Minimum of ||grad V|| over a grid, skipping points within ``exclusion`` of the origin."""
    if inclusive:
        axes = [np.linspace(lo, hi, res) for lo, hi in zip(box.low, box.high)]
        mesh = np.meshgrid(*axes, indexing='ij')
        points = np.stack([m.reshape(-1) for m in mesh], axis=1)
    else:
        points = cell_centres(box, res)
    points = points[np.linalg.norm(points, axis=1) >= exclusion]
    return float(np.min(gradient_norms(V, points)))


# Positive definiteness

@dataclass
class PositiveDefiniteReport:
    min_value: float
    argmin: np.ndarray
    value_at_origin: float
    samples: int

    @property
    def ok(self):
        return self.min_value > 0.0 and abs(self.value_at_origin) <= 1e-12

    def to_dict(self):
        return {'min_value': self.min_value, 'argmin': self.argmin.tolist(),
                'value_at_origin': self.value_at_origin, 'samples': self.samples, 'ok': self.ok}


def check_positive_definite(V, box: Box, samples=10000, seed=0) -> PositiveDefiniteReport:
    if samples < 1:
        raise ValueError("need at least one sample")
    bound = as_bound(V)
    rng = np.random.default_rng(seed)
    points = sample_uniform_box(box, samples, ORIGIN_RADIUS, rng)
    values = np.concatenate(map_chunks(bound.values, points, chunk_size=4096))
    worst = int(np.argmin(values))
    origin = float(bound.values(np.zeros((1, box.dim)))[0])
    return PositiveDefiniteReport(float(values[worst]), points[worst].copy(), origin, samples)


# Trajectories

def classify_trajectory(trajectory, conv_tol=DEFAULT_CONV_TOL) -> Termination:
    """The termination reason recorded when the trajectory was simulated."""
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    return Termination(trajectory.termination)


@dataclass
class RoaEstimate:
    initial_states: np.ndarray
    classifications: List[Termination]
    trajectories: list = field(default_factory=list, repr=False)

    @property
    def total(self):
        return len(self.classifications)

    @property
    def counts(self):
        return {t.value: sum(1 for c in self.classifications if c == t) for t in Termination}

    @property
    def fraction(self):
        if not self.classifications:
            return 0.0
        return self.counts[Termination.CONVERGED.value] / self.total

    def to_dict(self):
        return {
            'initial_states': self.initial_states.tolist(),
            'classifications': [c.value for c in self.classifications],
            'counts': self.counts,
            'fraction': self.fraction,
        }


def roa_estimate(system: DynSystem, controller, initial_states=None, grid=6, half_width=0.8,
                 dt=DEFAULT_DT, t_max=DEFAULT_T_MAX, conv_tol=DEFAULT_CONV_TOL) -> RoaEstimate:
    """
    Simulate every initial state (by default the cell centres of a grid over
    [-half_width, half_width]^m) and report the converged fraction.
    """
    if initial_states is None:
        initial_states = grid_initial_states(Box.symmetric(half_width, system.state_dim), grid)
    initial_states = np.atleast_2d(np.asarray(initial_states, dtype=np.float64))
    if initial_states.shape[0] == 0:
        raise ValueError("no initial states to simulate")
    parts = map_chunks(lambda chunk: simulate_many(system, controller, chunk, dt, t_max, conv_tol),
                       initial_states, chunk_size=64)
    trajectories = [t for part in parts for t in part]
    classifications = [classify_trajectory(t, conv_tol) for t in trajectories]
    estimate = RoaEstimate(initial_states, classifications, trajectories)
    logger.info("region of attraction: %d/%d converged", estimate.counts['converged'], estimate.total)
    return estimate


# Lyapunov derivative

@dataclass
class VdotScan:
    violation_fraction: float
    worst_point: np.ndarray
    worst_value: float
    checked: int
    margin: float

    def to_dict(self):
        return {'violation_fraction': self.violation_fraction, 'worst_point': self.worst_point.tolist(),
                'worst_value': self.worst_value, 'checked': self.checked, 'margin': self.margin}


def check_vdot_negative(V, system: DynSystem, controller, box: Box, grid_res=DEFAULT_GRID,
                        margin=0.0, exclusion=EXCLUSION_RADIUS) -> VdotScan:
    """Fraction of grid points outside the exclusion ball with dV/dt >= -margin."""
    if grid_res < 8:
        raise ValueError("grid resolution must be at least 8")
    bound = as_bound(V)
    points = cell_centres(box, grid_res)
    points = points[np.linalg.norm(points, axis=1) >= exclusion]
    rates = np.concatenate(map_chunks(
        lambda chunk: vdot(bound.arch, bound.params, system, controller, chunk), points))
    violations = rates >= -margin
    worst = int(np.argmax(rates))
    return VdotScan(float(np.mean(violations)), points[worst].copy(), float(rates[worst]),
                    len(points), margin)


# 1-D root oracle

def bisection_roots(f, lo, hi, n=1000, xtol=1e-14):
    """
    Roots of a scalar function on [lo, hi]: sign changes over ``n`` equal
    subintervals, each refined by Brent's method.
    """
    xs = np.linspace(lo, hi, n + 1)
    ys = np.array([f(x) for x in xs])
    roots = []
    for a, b, fa, fb in zip(xs[:-1], xs[1:], ys[:-1], ys[1:]):
        if fa == 0.0:
            roots.append(float(a))
        elif fa * fb < 0.0:
            roots.append(float(brentq(f, a, b, xtol=xtol)))
    if ys[-1] == 0.0:
        roots.append(float(xs[-1]))
    return roots
