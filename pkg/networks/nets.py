# networks/nets.py
"""
Network architectures for Lyapunov functions and controllers.

Every architecture exposes ``layout`` (its ParamLayout), ``input_dim``,
``output_dim``, ``trace(view, x)`` building its output on a tape, and
``describe()`` returning the JSON descriptor used by checkpoints.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import ParamLayout, ParamVector, ParamView, Tape
from .exceptions import DescriptorError, DimensionError, NumericFault

logger = logging.getLogger(__name__)

POLARNET = 'polarnet'
PLAIN_MLP = 'plain-mlp'
LYAPUNOV_NET = 'lyapunov-net'
WEI = 'wei'
MLP = 'mlp'
FIELD = 'field'

BASELINE_KINDS = (PLAIN_MLP, LYAPUNOV_NET, WEI)
# hyperparameters each baseline actually reads
BASELINE_OPTIONS = {PLAIN_MLP: (), LYAPUNOV_NET: ('gamma',), WEI: ('beta', 'features')}


@dataclass(frozen=True)
class MlpSpec:
    """
    Fully connected tanh network; identity on the output layer
    """
    layer_widths: Tuple[int, ...]
    has_bias: bool = True
    gain: float = 1.0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise DescriptorError(f"layer widths must be >= 2 positive integers, got {widths}",
                                  key='layer_widths')
        object.__setattr__(self, 'layer_widths', widths)

    @property
    def input_dim(self):
        return self.layer_widths[0]

    @property
    def output_dim(self):
        return self.layer_widths[-1]

    @property
    def layout(self):
        entries = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_widths, self.layer_widths[1:])):
            entries.append((f"W{i}", (fan_in, fan_out)))
            if self.has_bias:
                entries.append((f"b{i}", (1, fan_out)))
        return ParamLayout(entries)

    def trace(self, view: ParamView, x):
        if x.shape[1] != self.input_dim:
            raise DimensionError(f"MLP expects input width {self.input_dim}, got {x.shape[1]}")
        rows = x.shape[0]
        h = x
        last = len(self.layer_widths) - 2
        for i in range(last + 1):
            h = h @ view[f"W{i}"]
            if self.has_bias:
                h = h + dc.tile_rows(view[f"b{i}"], rows)
            if i < last:
                h = dc.tanh(h)
        return h

    def init_segments(self, rng, prefix=''):
        segments = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_widths, self.layer_widths[1:])):
            limit = self.gain * math.sqrt(6.0 / (fan_in + fan_out))
            segments[f"{prefix}W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            if self.has_bias:
                bound = self.gain / math.sqrt(fan_in)
                segments[f"{prefix}b{i}"] = rng.uniform(-bound, bound, size=(1, fan_out))
        return segments

    def describe(self):
        return {'kind': MLP, 'layer_widths': list(self.layer_widths),
                'has_bias': self.has_bias, 'gain': self.gain}


@dataclass(frozen=True)
class CouplingLayerSpec:
    """
    Affine coupling layer: one block passes through, the other is scaled by
    exp(f_s(kept)) and shifted by f_t(kept)
    """
    dim: int
    split: int
    keep_low: bool
    scale_net: MlpSpec
    shift_net: MlpSpec

    def __post_init__(self):
        if not 1 <= self.split <= self.dim - 1:
            raise DescriptorError(f"split must lie in 1..{self.dim - 1}, got {self.split}", key='split')
        for net in (self.scale_net, self.shift_net):
            if net.input_dim != self.kept_size or net.output_dim != self.moved_size:
                raise DimensionError(
                    f"coupling sub-net maps {net.input_dim}->{net.output_dim}, "
                    f"layer needs {self.kept_size}->{self.moved_size}"
                )

    @property
    def kept_size(self):
        return self.split if self.keep_low else self.dim - self.split

    @property
    def moved_size(self):
        return self.dim - self.kept_size

    @property
    def layout(self):
        return ParamLayout.concat([('scale', self.scale_net.layout), ('shift', self.shift_net.layout)])

    def _split(self, y):
        low, high = y[:, 0:self.split], y[:, self.split:self.dim]
        return (low, high) if self.keep_low else (high, low)

    def _join(self, kept, moved):
        parts = (kept, moved) if self.keep_low else (moved, kept)
        return dc.concat_cols(parts)

    def trace(self, view: ParamView, y):
        if y.shape[1] != self.dim:
            raise DimensionError(f"coupling layer expects width {self.dim}, got {y.shape[1]}")
        kept, moved = self._split(y)
        with view.tape.scope('scale'):
            s = self.scale_net.trace(view.child('scale'), kept)
            factor = dc.exp(s)
        with view.tape.scope('shift'):
            t = self.shift_net.trace(view.child('shift'), kept)
        return self._join(kept, factor * moved + t)

    def trace_inverse(self, view: ParamView, y):
        kept, moved = self._split(y)
        with view.tape.scope('scale'):
            s = self.scale_net.trace(view.child('scale'), kept)
            inverse_factor = dc.exp(-s)
        with view.tape.scope('shift'):
            t = self.shift_net.trace(view.child('shift'), kept)
        return self._join(kept, (moved - t) * inverse_factor)

    def init_segments(self, rng, prefix=''):
        segments = self.scale_net.init_segments(rng, f"{prefix}scale.")
        segments.update(self.shift_net.init_segments(rng, f"{prefix}shift."))
        return segments


@dataclass(frozen=True)
class PolarNetSpec:
    """
    V(x) = ||Psi(x)||^2 with Psi a stack of alternating coupling layers.

    The first layer preserves the high block, the next the low block, and
    so on. Shift nets carry no bias, so Psi(0) = 0 for any parameters.
    """
    dim: int
    n_layers: int = 4
    hidden: Tuple[int, ...] = (12, 12)
    gain: float = 0.5

    def __post_init__(self):
        if self.dim < 2:
            raise DescriptorError("PolarNet needs a state dimension of at least 2", key='dim')
        if self.n_layers < 1:
            raise DescriptorError("PolarNet needs at least one coupling layer", key='n_layers')
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))

    @property
    def split(self):
        # odd dimensions put the extra coordinate in the low block
        return math.ceil(self.dim / 2)

    @property
    def layers(self):
        layers = []
        for index in range(self.n_layers):
            keep_low = index % 2 == 1
            kept = self.split if keep_low else self.dim - self.split
            widths = (kept, *self.hidden, self.dim - kept)
            layers.append(CouplingLayerSpec(
                dim=self.dim,
                split=self.split,
                keep_low=keep_low,
                scale_net=MlpSpec(widths, has_bias=True, gain=self.gain),
                shift_net=MlpSpec(widths, has_bias=False, gain=self.gain),
            ))
        return tuple(layers)

    @property
    def input_dim(self):
        return self.dim

    @property
    def output_dim(self):
        return 1

    @property
    def layout(self):
        return ParamLayout.concat([(f"layers.{i}", layer.layout) for i, layer in enumerate(self.layers)])

    def trace_psi(self, view: ParamView, x):
        y = x
        for index, layer in enumerate(self.layers):
            with view.tape.scope(f"coupling[{index}]"):
                y = layer.trace(view.child(f"layers.{index}"), y)
        return y

    def trace_psi_inverse(self, view: ParamView, z):
        y = z
        for index in reversed(range(self.n_layers)):
            layer = self.layers[index]
            with view.tape.scope(f"coupling[{index}]"):
                y = layer.trace_inverse(view.child(f"layers.{index}"), y)
        return y

    def trace(self, view: ParamView, x):
        z = self.trace_psi(view, x)
        return dc.squared_norm(z)

    def init_segments(self, rng):
        segments = {}
        for index, layer in enumerate(self.layers):
            segments.update(layer.init_segments(rng, f"layers.{index}."))
        return segments

    def describe(self):
        return {'kind': POLARNET, 'dim': self.dim, 'n_layers': self.n_layers,
                'hidden': list(self.hidden), 'gain': self.gain}


@dataclass(frozen=True)
class BaselineSpec:
    """
    Comparison architectures: plain MLP, Lyapunov-Net and the
    quadratic-plus-feature form (kind ``wei``).
    """
    kind: str
    dim: int
    hidden: Tuple[int, ...] = (64, 64, 64)
    gamma: float = 1e-2
    beta: float = 1e-6
    features: int = 64

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise DescriptorError(f"unknown baseline kind '{self.kind}'", key='kind')
        if self.dim < 1:
            raise DescriptorError("state dimension must be positive", key='dim')
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))

    @property
    def backbone(self):
        if self.kind == WEI:
            return MlpSpec((self.dim, *self.hidden, self.features), has_bias=False)
        return MlpSpec((self.dim, *self.hidden, 1), has_bias=True)

    @property
    def input_dim(self):
        return self.dim

    @property
    def output_dim(self):
        return 1

    @property
    def layout(self):
        return ParamLayout.concat([('backbone', self.backbone.layout)])

    def trace(self, view: ParamView, x):
        backbone = self.backbone
        sub = view.child('backbone')
        if self.kind == PLAIN_MLP:
            return backbone.trace(sub, x)
        if self.kind == LYAPUNOV_NET:
            h = backbone.trace(sub, x)
            h0 = backbone.trace(sub, view.tape.constant(np.zeros((1, self.dim))))
            return dc.absolute(h - dc.tile_rows(h0, x.shape[0])) + self.gamma * dc.squared_norm(x)
        phi = backbone.trace(sub, x)
        return (0.5 * self.beta) * dc.squared_norm(x) + 0.5 * dc.squared_norm(phi)

    def init_segments(self, rng):
        return self.backbone.init_segments(rng, 'backbone.')

    def describe(self):
        descriptor = {'kind': self.kind, 'dim': self.dim, 'hidden': list(self.hidden)}
        for option in BASELINE_OPTIONS[self.kind]:
            descriptor[option] = getattr(self, option)
        return descriptor


@dataclass(frozen=True)
class FieldNet:
    """
    Parameter-free architecture wrapping a closed-form scalar field.

    ``fn`` receives a (batch, dim) array or node and must use the
    diffcore helpers so it works in both cases.
    """
    name: str
    dim: int
    fn: Callable = field(compare=False, repr=False)

    @property
    def input_dim(self):
        return self.dim

    @property
    def output_dim(self):
        return 1

    @property
    def layout(self):
        return ParamLayout()

    def trace(self, view: ParamView, x):
        return self.fn(x)

    def __call__(self, x):
        batch = np.asarray(x, dtype=np.float64)
        if batch.ndim == 1:
            return float(np.asarray(self.fn(batch.reshape(1, -1))).reshape(-1)[0])
        return np.asarray(self.fn(batch)).reshape(-1)

    def init_segments(self, rng):
        return {}

    def describe(self):
        return {'kind': FIELD, 'name': self.name, 'dim': self.dim}


class BoundNet:
    """
    An architecture together with its parameters; callable on numpy batches
    """

    def __init__(self, arch, params: Optional[ParamVector] = None):
        if params is None:
            params = ParamVector.zeros(arch.layout)
        if params.layout != arch.layout:
            raise DimensionError("parameters do not match the architecture layout")
        self.arch = arch
        self.params = params

    def __repr__(self):
        return f"BoundNet({self.arch.describe()['kind']}, params={len(self.params)})"

    @property
    def input_dim(self):
        return self.arch.input_dim

    @property
    def output_dim(self):
        return self.arch.output_dim

    def trace(self, tape: Tape, x, theta=None):
        if theta is None:
            theta = tape.constant(self.params.values)
        return self.arch.trace(ParamView(theta, self.arch.layout), x)

    def __call__(self, x):
        """Outputs for a (batch, dim) array, or one output vector for a single state."""
        single = np.ndim(x) == 1
        batch = dc._as_batch(x, self.input_dim)
        tape = Tape()
        out = self.trace(tape, tape.constant(batch)).value
        return out[0].copy() if single else out

    def values(self, x):
        """Scalar outputs as a flat array (scalar architectures only)."""
        return self(np.atleast_2d(np.asarray(x, dtype=np.float64)))[:, 0]

    def value_and_grad(self, x):
        return dc.value_and_input_grad(self.arch, self.params, x)


class LinearFeedback:
    """
    u = -K x
    """

    def __init__(self, gain):
        gain = np.atleast_2d(np.asarray(gain, dtype=np.float64))
        self.gain = gain

    def __repr__(self):
        return f"LinearFeedback(K={self.gain.tolist()})"

    @property
    def input_dim(self):
        return self.gain.shape[1]

    @property
    def output_dim(self):
        return self.gain.shape[0]

    def trace(self, tape: Tape, x, theta=None):
        return x @ tape.constant(-self.gain.T)

    def __call__(self, x):
        single = np.ndim(x) == 1
        out = dc._as_batch(x, self.input_dim) @ (-self.gain.T)
        return out[0] if single else out


class ZeroInput:
    """
    Open loop: u = 0
    """

    def __init__(self, state_dim, control_dim):
        self.state_dim = state_dim
        self.control_dim = control_dim

    @property
    def input_dim(self):
        return self.state_dim

    @property
    def output_dim(self):
        return self.control_dim

    def trace(self, tape: Tape, x, theta=None):
        return tape.constant(np.zeros((x.shape[0], self.output_dim)))

    def __call__(self, x):
        if np.ndim(x) == 1:
            return np.zeros(self.output_dim)
        return np.zeros((np.shape(x)[0], self.output_dim))


# Module-level operations

def _evaluate(trace, layout, params: ParamVector, x, width):
    if params.layout != layout:
        raise DimensionError("parameters do not match the architecture layout")
    single = np.ndim(x) == 1
    batch = dc._as_batch(x, width)
    tape = Tape()
    out = trace(ParamView(tape.constant(params.values), layout), tape.constant(batch)).value
    return out[0].copy() if single else out


def mlp_eval(spec: MlpSpec, params: ParamVector, x):
    return _evaluate(spec.trace, spec.layout, params, x, spec.input_dim)


def coupling_forward(layer: CouplingLayerSpec, params: ParamVector, y):
    return _evaluate(layer.trace, layer.layout, params, y, layer.dim)


def coupling_inverse(layer: CouplingLayerSpec, params: ParamVector, y):
    return _evaluate(layer.trace_inverse, layer.layout, params, y, layer.dim)


def psi_forward(spec: PolarNetSpec, params: ParamVector, x):
    return _evaluate(spec.trace_psi, spec.layout, params, x, spec.dim)


def psi_inverse(spec: PolarNetSpec, params: ParamVector, z):
    return _evaluate(spec.trace_psi_inverse, spec.layout, params, z, spec.dim)


def lyapunov_value(arch, params: ParamVector, x):
    """V(x) for a single state (float) or a batch (flat array)."""
    out = _evaluate(arch.trace, arch.layout, params, x, arch.input_dim)
    if np.ndim(x) == 1:
        return float(out[0])
    return out[:, 0]


def init_params(arch, seed: int) -> ParamVector:
    """Scaled-uniform initialization, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    segments = arch.init_segments(rng)
    params = ParamVector.from_segments(arch.layout, segments)
    logger.debug("initialized %s with %d parameters (seed=%d)", arch.describe()['kind'], len(params), seed)
    return params


SCALE_OUTPUT_LIMIT = 10.0


def scale_output_bounds(spec: PolarNetSpec, params: ParamVector):
    """
    Upper bound on |f_s| per coupling layer from the output-layer parameters
    alone; hidden tanh units lie in (-1, 1).
    """
    bounds = []
    for index, layer in enumerate(spec.layers):
        scale = params.child(f"layers.{index}").child('scale')
        last = len(layer.scale_net.layer_widths) - 2
        W = scale.segment(f"W{last}")
        b = scale.segment(f"b{last}")[0]
        if last == 0:
            # no hidden layer: the bound depends on the input, so skip it
            bounds.append(float('inf'))
            continue
        bounds.append(float(np.max(np.abs(b) + np.sum(np.abs(W), axis=0))))
    return bounds


def check_scale_outputs(spec: PolarNetSpec, params: ParamVector, limit=SCALE_OUTPUT_LIMIT):
    for index, bound in enumerate(scale_output_bounds(spec, params)):
        if bound != float('inf') and bound > limit:
            raise NumericFault(f"coupling[{index}]/scale",
                               f"|f_s| may reach {bound:.3g}, above the limit {limit:g}")


def radial_profile(V, direction, samples=50):
    """
    V along the ray t * direction for t in (0, 1].

    Used as the properness proxy: for a single pole function fitted on a
    box the profile toward each corner should increase strictly.
    """
    direction = np.asarray(direction, dtype=np.float64)
    radii = np.linspace(0.0, 1.0, samples + 1)[1:]
    points = radii[:, None] * direction[None, :]
    return radii, V.values(points)


def is_strictly_increasing(values):
    return bool(np.all(np.diff(values) > 0.0))


# Descriptors

def _require(descriptor, key):
    if key not in descriptor:
        raise DescriptorError(f"architecture descriptor is missing '{key}'", key=key, reason='missing')
    return descriptor[key]


def _positive_int(descriptor, key, default=None):
    value = descriptor.get(key, default) if default is not None else _require(descriptor, key)
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise DescriptorError(f"'{key}' must be a positive integer", key=key)
    return value


def _widths(descriptor, key, default=None):
    value = descriptor.get(key, default) if default is not None else _require(descriptor, key)
    if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value):
        raise DescriptorError(f"'{key}' must be a list of positive integers", key=key)
    return tuple(value)


def _positive_float(descriptor, key, default):
    value = descriptor.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise DescriptorError(f"'{key}' must be a positive number", key=key)
    return float(value)


DESCRIPTOR_KEYS = {
    POLARNET: {'kind', 'dim', 'n_layers', 'hidden', 'gain'},
    PLAIN_MLP: {'kind', 'dim', 'hidden'},
    LYAPUNOV_NET: {'kind', 'dim', 'hidden', 'gamma'},
    WEI: {'kind', 'dim', 'hidden', 'beta', 'features'},
    MLP: {'kind', 'layer_widths', 'has_bias', 'gain'},
    FIELD: {'kind', 'name', 'dim'},
}


def architecture_from_descriptor(descriptor):
    """Rebuild an architecture from the dict produced by ``describe()``."""
    if not isinstance(descriptor, dict):
        raise DescriptorError("architecture descriptor must be an object")
    kind = _require(descriptor, 'kind')
    if kind not in DESCRIPTOR_KEYS:
        raise DescriptorError(f"unknown architecture kind '{kind}'", key='kind')
    unknown = sorted(set(descriptor) - DESCRIPTOR_KEYS[kind])
    if unknown:
        raise DescriptorError(f"unknown descriptor key '{unknown[0]}'", key=unknown[0], reason='unknown')

    if kind == POLARNET:
        return PolarNetSpec(
            dim=_positive_int(descriptor, 'dim'),
            n_layers=_positive_int(descriptor, 'n_layers', 4),
            hidden=_widths(descriptor, 'hidden', [12, 12]),
            gain=_positive_float(descriptor, 'gain', 0.5),
        )
    if kind == MLP:
        has_bias = descriptor.get('has_bias', True)
        if not isinstance(has_bias, bool):
            raise DescriptorError("'has_bias' must be a boolean", key='has_bias')
        return MlpSpec(
            layer_widths=_widths(descriptor, 'layer_widths'),
            has_bias=has_bias,
            gain=_positive_float(descriptor, 'gain', 1.0),
        )
    if kind == FIELD:
        # target fields live with the experiment data
        from experiments.targets import target_field
        name = _require(descriptor, 'name')
        try:
            return target_field(name)
        except KeyError:
            raise DescriptorError(f"unknown field '{name}'", key='name') from None
    return BaselineSpec(
        kind=kind,
        dim=_positive_int(descriptor, 'dim'),
        hidden=_widths(descriptor, 'hidden', [64, 64, 64]),
        gamma=_positive_float(descriptor, 'gamma', 1e-2),
        beta=_positive_float(descriptor, 'beta', 1e-6),
        features=_positive_int(descriptor, 'features', 64),
    )


def controller_spec(state_dim, input_dim, hidden=(32, 32)):
    """Bias-free tanh MLP, so u(0) = 0 and the origin stays an equilibrium."""
    return MlpSpec((state_dim, *hidden, input_dim), has_bias=False)
