# experiments/train.py
"""
Losses, the Adam optimizer, state sampling and the two training loops:
fitting a Lyapunov network to a scalar field, and jointly synthesizing a
controller with its Lyapunov function.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from networks import diffcore as dc
from networks.diffcore import ParamVector, ParamView
from networks.exceptions import LayoutMismatch, NumericFault
from networks.nets import (PLAIN_MLP, BaselineSpec, BoundNet, LinearFeedback,
                           architecture_from_descriptor, controller_spec, init_params)

from .dynamics import Box, DynSystem, get_system, linearize, lqr_gain
from .exceptions import ConfigError, SamplerRejectionError, TrainingAborted
from .targets import target_field

logger = logging.getLogger(__name__)

FIT = 'fit'
SYNTHESIZE = 'synthesize'
MODE_CHOICES = (FIT, SYNTHESIZE)

# independent random streams derived from one seed
SAMPLER_STREAM = 1
WARM_START_STREAM = 2
EVAL_STREAM = 3
CONTROLLER_SEED_OFFSET = 1

MIN_ACCEPTANCE = 0.01


# Configuration

@dataclass
class SamplerConfig:
    half_width: float = 1.0
    batch: int = 1024
    cutoff_radius: float = 0.0

    def box(self, dim):
        return Box.symmetric(self.half_width, dim)


@dataclass
class OptimizerConfig:
    lr: float = 5e-3
    warmup_steps: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class WarmStartConfig:
    enabled: bool = False
    steps: int = 500
    lr: float = 5e-3
    batch: int = 256


@dataclass
class RoaConfig:
    grid: int = 6
    half_width: float = 0.8
    circle_radius: Optional[float] = None
    circle_count: int = 36
    dt: float = 0.01
    t_max: float = 20.0
    conv_tol: float = 1e-3


@dataclass
class ExperimentConfig:
    """
    Declarative description of one fit or synthesis run
    """
    mode: str
    lyapunov: Dict
    steps: int
    seed: int = 0
    target: Optional[str] = None
    system: Optional[str] = None
    controller: Optional[Dict] = None
    margin: float = 0.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: Dict[str, OptimizerConfig] = field(default_factory=dict)
    warm_start: WarmStartConfig = field(default_factory=WarmStartConfig)
    roa: RoaConfig = field(default_factory=RoaConfig)
    log_every: int = 100
    snapshot_every: int = 0
    snapshot_grid: int = 21
    eval_samples: int = 10000
    preset: Optional[str] = None

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()

    def optimizer_for(self, role):
        return self.optimizer.get(role) or OptimizerConfig()


@dataclass
class TrainingHistory:
    losses: List[float] = field(default_factory=list)
    snapshots: List[Dict] = field(default_factory=list)

    def __len__(self):
        return len(self.losses)

    def record(self, loss):
        self.losses.append(float(loss))

    def mean_loss(self, start, stop):
        window = self.losses[start:stop]
        return float(np.mean(window)) if window else float('nan')


# Adam

@dataclass
class OptimState:
    config: OptimizerConfig
    m: np.ndarray
    v: np.ndarray
    layout: object
    step: int = 0

    @classmethod
    def create(cls, params: ParamVector, config: OptimizerConfig):
        size = len(params)
        return cls(config=config, m=np.zeros(size), v=np.zeros(size), layout=params.layout)

    @property
    def learning_rate(self):
        return warmup_lr(self.config.lr, self.step, self.config.warmup_steps)


def warmup_lr(base, step, warmup_steps):
    """Linear ramp base * min(1, step / warmup_steps)."""
    if warmup_steps <= 0:
        return base
    return base * min(1.0, step / warmup_steps)


def adam_step(opt: OptimState, params: ParamVector, grads: ParamVector) -> ParamVector:
    """
    One bias-corrected Adam update with decoupled weight decay; advances ``opt``.
    """
    if params.layout != opt.layout or grads.layout != opt.layout:
        raise LayoutMismatch("optimizer state, parameters and gradients must share a layout")
    cfg = opt.config
    opt.step += 1
    lr = opt.learning_rate
    g = grads.values
    opt.m = cfg.beta1 * opt.m + (1.0 - cfg.beta1) * g
    opt.v = cfg.beta2 * opt.v + (1.0 - cfg.beta2) * g * g
    m_hat = opt.m / (1.0 - cfg.beta1 ** opt.step)
    v_hat = opt.v / (1.0 - cfg.beta2 ** opt.step)
    theta = params.values
    updated = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    if cfg.weight_decay:
        updated = updated - lr * cfg.weight_decay * theta
    return params.with_values(updated)


# Sampling

def sample_uniform_box(box: Box, batch, cutoff_radius, rng) -> np.ndarray:
    """
    ``batch`` i.i.d. uniform states in ``box`` with norm at least ``cutoff_radius``.
    """
    if batch < 1:
        raise ConfigError('sampler.batch', "batch must be at least 1")
    if cutoff_radius <= 0:
        return rng.uniform(box.lower, box.upper, size=(batch, box.dim))
    kept = []
    accepted = drawn = 0
    while accepted < batch:
        candidates = rng.uniform(box.lower, box.upper, size=(batch, box.dim))
        ok = candidates[np.linalg.norm(candidates, axis=1) >= cutoff_radius]
        drawn += batch
        accepted += len(ok)
        kept.append(ok)
        if drawn >= 100 * batch and accepted < MIN_ACCEPTANCE * drawn:
            raise SamplerRejectionError(
                'sampler.cutoff_radius',
                f"cutoff radius {cutoff_radius} rejects more than 99% of the box",
            )
    return np.vstack(kept)[:batch]


# Losses. The trace_* functions build (1, 1) objectives on a tape.

def trace_vdot(tape, V_arch, V_view, system: DynSystem, control, x_node, create_graph=False):
    """
    Per-row dV/dt = <grad V(x), f(x, u(x))>; ``control`` maps an x node to a u node.
    """
    V = V_arch.trace(V_view, x_node)
    (grad_v,) = tape.grad(dc.sum_rows(V), [x_node], create_graph=create_graph)
    rates = system.trace_rhs(x_node, control(x_node))
    return V, dc.inner(grad_v, rates)


def trace_risk_reduced(tape, V_arch, V_view, system, control, x_node, margin):
    _, vdot_node = trace_vdot(tape, V_arch, V_view, system, control, x_node, create_graph=True)
    return dc.batch_mean(dc.hinge(vdot_node + margin))


def trace_risk_canonical(tape, V_arch, V_view, system, control, x_node, margin=0.0):
    V, vdot_node = trace_vdot(tape, V_arch, V_view, system, control, x_node, create_graph=True)
    V0 = V_arch.trace(V_view, tape.constant(np.zeros((1, V_arch.input_dim))))
    return dc.batch_mean(dc.hinge(-V) + dc.hinge(vdot_node + margin)) + V0 * V0


def synthesis_risk(V_arch):
    """
    Risk minimized by synthesize_controller. The reduced risk drops the
    positivity terms, so an architecture without built-in positive
    definiteness (plain-mlp) trains on the canonical one.
    """
    if isinstance(V_arch, BaselineSpec) and V_arch.kind == PLAIN_MLP:
        return trace_risk_canonical
    return trace_risk_reduced


def trace_mse(tape, V_arch, V_view, batch, targets):
    V = V_arch.trace(V_view, tape.constant(batch))
    diff = V - tape.constant(np.asarray(targets, dtype=np.float64).reshape(-1, 1))
    return dc.batch_mean(diff * diff)


def _controller_trace(tape, controller):
    return lambda x_node: controller.trace(tape, x_node)


def _run_objective(build, V_params):
    tape = dc.Tape()
    theta = tape.constant(V_params.values)
    out = build(tape, ParamView(theta, V_params.layout))
    return float(out.value.reshape(-1)[0])


def vdot(V_arch, V_params: ParamVector, system: DynSystem, controller, x):
    """dV/dt along the closed loop at one state (float) or per batch row (array)."""
    single = np.ndim(x) == 1
    batch = dc._as_batch(x, system.state_dim)
    tape = dc.Tape()
    view = ParamView(tape.constant(V_params.values), V_params.layout)
    _, rates = trace_vdot(tape, V_arch, view, system, _controller_trace(tape, controller),
                          tape.variable(batch))
    values = rates.value[:, 0]
    return float(values[0]) if single else values.copy()


def risk_canonical(V_arch, V_params, system, controller, batch, margin=0.0):
    """mean(max(0, -V) + max(0, dV/dt + margin)) + V(0)^2"""
    batch = dc._as_batch(batch, system.state_dim)
    return _run_objective(lambda tape, view: trace_risk_canonical(
        tape, V_arch, view, system, _controller_trace(tape, controller), tape.variable(batch),
        margin), V_params)


def risk_reduced(V_arch, V_params, system, controller, batch, margin=0.0):
    """mean(max(0, dV/dt + margin)) for structurally positive definite V."""
    batch = dc._as_batch(batch, system.state_dim)
    return _run_objective(lambda tape, view: trace_risk_reduced(
        tape, V_arch, view, system, _controller_trace(tape, controller), tape.variable(batch),
        margin), V_params)


def mse_loss(V_arch, V_params, target, batch):
    batch = dc._as_batch(batch, V_arch.input_dim)
    targets = np.asarray(target(batch), dtype=np.float64).reshape(-1)
    return _run_objective(lambda tape, view: trace_mse(tape, V_arch, view, batch, targets), V_params)


def evaluate_mse(V_arch, V_params, target, box: Box, samples=10000, seed=0):
    """MSE on a held-out uniform sample of the box."""
    rng = np.random.default_rng([seed, EVAL_STREAM])
    batch = sample_uniform_box(box, samples, 0.0, rng)
    predicted = BoundNet(V_arch, V_params).values(batch)
    expected = np.asarray(target(batch), dtype=np.float64).reshape(-1)
    return float(np.mean((predicted - expected) ** 2))


# Training loops

def _guarded(step, fn):
    try:
        return fn()
    except NumericFault as exc:
        logger.error("numeric fault at step %d: %s", step, exc)
        raise TrainingAborted(step, exc) from exc


def imitate_lqr(system: DynSystem, u_arch, u_params: ParamVector, cfg: WarmStartConfig,
                box: Box, seed=0):
    """
    Pre-train the controller to reproduce the LQR law u = -K x of the
    linearized system. Returns the new parameters and K.
    """
    K, _ = lqr_gain(linearize(system))
    logger.info("LQR warm start: K=%s, %d imitation steps", np.round(K, 6).tolist(), cfg.steps)
    reference = LinearFeedback(K)
    rng = np.random.default_rng([seed, WARM_START_STREAM])
    opt = OptimState.create(u_params, OptimizerConfig(lr=cfg.lr))

    def objective(tape, theta, batch):
        u = u_arch.trace(ParamView(theta, u_params.layout), tape.constant(batch))
        err = u - tape.constant(reference(batch))
        return dc.batch_mean(dc.squared_norm(err))

    for step in range(1, cfg.steps + 1):
        batch = sample_uniform_box(box, cfg.batch, 0.0, rng)
        loss, (grad,) = _guarded(step, lambda: dc.param_gradients(
            lambda tape, theta: objective(tape, theta, batch), u_params))
        u_params = adam_step(opt, u_params, grad)
        if step == cfg.steps:
            logger.info("LQR imitation finished, loss %.6e", loss)
    return u_params, K


def fit_function(cfg: ExperimentConfig):
    """
    Fit the Lyapunov network to ``cfg.target`` by minimizing the MSE on
    fresh uniform batches. Returns (params, history).
    """
    arch = architecture_from_descriptor(cfg.lyapunov)
    target = target_field(cfg.target)
    box = cfg.sampler.box(arch.input_dim)
    params = init_params(arch, cfg.seed)
    opt = OptimState.create(params, cfg.optimizer_for('lyapunov'))
    rng = np.random.default_rng([cfg.seed, SAMPLER_STREAM])
    history = TrainingHistory()
    logger.info("fitting %s to '%s' for %d steps (batch %d)",
                cfg.lyapunov['kind'], cfg.target, cfg.steps, cfg.sampler.batch)

    for step in range(1, cfg.steps + 1):
        batch = sample_uniform_box(box, cfg.sampler.batch, cfg.sampler.cutoff_radius, rng)
        targets = target(batch)
        loss, (grad,) = _guarded(step, lambda: dc.param_gradients(
            lambda tape, theta: trace_mse(tape, arch, ParamView(theta, params.layout), batch, targets),
            params))
        params = _guarded(step, lambda: adam_step(opt, params, grad))
        history.record(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d/%d  mse %.6e  lr %.3e", step, cfg.steps, loss, opt.learning_rate)
        if cfg.snapshot_every and step % cfg.snapshot_every == 0:
            history.snapshots.append(_fit_snapshot(step, arch, params, target, box, cfg))
    return params, history


def _fit_snapshot(step, arch, params, target, box, cfg):
    from .verify import find_critical_points

    report = find_critical_points(BoundNet(arch, params), box, grid_res=cfg.snapshot_grid)
    snapshot = {
        'step': step,
        'mse': evaluate_mse(arch, params, target, box, samples=min(cfg.eval_samples, 2048), seed=cfg.seed),
        'critical_points': len(report.points),
    }
    logger.info("snapshot %s", snapshot)
    return snapshot


def build_controller(cfg: ExperimentConfig, system: DynSystem):
    if cfg.controller:
        return architecture_from_descriptor(cfg.controller)
    return controller_spec(system.state_dim, system.input_dim)


def synthesize_controller(cfg: ExperimentConfig):
    """
    Train controller and Lyapunov network together on the reduced risk
    (the canonical risk for plain-mlp, see synthesis_risk).

    Both networks are updated every step from the same batch, each with
    its own optimizer state. Returns (u_params, V_params, history).
    """
    system = get_system(cfg.system)
    V_arch = architecture_from_descriptor(cfg.lyapunov)
    u_arch = build_controller(cfg, system)
    box = cfg.sampler.box(system.state_dim)
    V_params = init_params(V_arch, cfg.seed)
    u_params = init_params(u_arch, cfg.seed + CONTROLLER_SEED_OFFSET)
    risk = synthesis_risk(V_arch)
    history = TrainingHistory()

    if cfg.warm_start.enabled and cfg.steps > 0:
        u_params, _ = imitate_lqr(system, u_arch, u_params, cfg.warm_start, box, cfg.seed)

    V_opt = OptimState.create(V_params, cfg.optimizer_for('lyapunov'))
    u_opt = OptimState.create(u_params, cfg.optimizer_for('controller'))
    rng = np.random.default_rng([cfg.seed, SAMPLER_STREAM])
    logger.info("synthesizing a controller for '%s' with %s for %d steps (batch %d, margin %g)",
                system.name, cfg.lyapunov['kind'], cfg.steps, cfg.sampler.batch, cfg.margin)

    def objective(tape, theta_v, theta_u, batch):
        control = lambda x_node: u_arch.trace(ParamView(theta_u, u_params.layout), x_node)
        return risk(tape, V_arch, ParamView(theta_v, V_params.layout), system, control,
                    tape.variable(batch), cfg.margin)

    for step in range(1, cfg.steps + 1):
        batch = sample_uniform_box(box, cfg.sampler.batch, cfg.sampler.cutoff_radius, rng)
        loss, (V_grad, u_grad) = _guarded(step, lambda: dc.param_gradients(
            lambda tape, theta_v, theta_u: objective(tape, theta_v, theta_u, batch),
            V_params, u_params))
        V_params = _guarded(step, lambda: adam_step(V_opt, V_params, V_grad))
        u_params = _guarded(step, lambda: adam_step(u_opt, u_params, u_grad))
        history.record(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d/%d  risk %.6e", step, cfg.steps, loss)
        if cfg.snapshot_every and step % cfg.snapshot_every == 0:
            history.snapshots.append(
                _synth_snapshot(step, system, V_arch, V_params, u_arch, u_params, box, batch, cfg, risk))
    return u_params, V_params, history


def _synth_snapshot(step, system, V_arch, V_params, u_arch, u_params, box, batch, cfg, risk):
    from .verify import check_vdot_negative, find_critical_points

    V = BoundNet(V_arch, V_params)
    controller = BoundNet(u_arch, u_params)
    report = find_critical_points(V, box, grid_res=cfg.snapshot_grid)
    scan = check_vdot_negative(V, system, controller, box, grid_res=cfg.snapshot_grid, margin=0.0)
    snapshot = {
        'step': step,
        'risk': _run_objective(lambda tape, view: risk(
            tape, V_arch, view, system, _controller_trace(tape, controller), tape.variable(batch),
            cfg.margin), V_params),
        'violation_fraction': scan.violation_fraction,
        'critical_points': len(report.points),
    }
    logger.info("snapshot %s", snapshot)
    return snapshot
