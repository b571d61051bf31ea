# networks/diffcore.py
"""
Reverse-mode differentiation on a tape of numpy-valued nodes.

Every primitive appends one node to a Tape. Backward passes are built out of
the same primitives, so the gradient of a gradient is just another call to
``Tape.grad``. Values are 64-bit float arrays; per-sample quantities are
2-D ``(batch, width)`` arrays and parameter vectors are 1-D.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DimensionError, LayoutMismatch, NumericFault, UnsupportedPrimitive

logger = logging.getLogger(__name__)


# Parameter storage

@dataclass(frozen=True)
class Segment:
    """
    A named block of the flat parameter array
    """
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self):
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def stop(self):
        return self.offset + self.size


class ParamLayout:
    """
    Ordered, gap-free partition of a flat parameter array into named segments
    """

    def __init__(self, entries: Sequence[Tuple[str, Tuple[int, ...]]] = ()):
        segments = []
        offset = 0
        seen = set()
        for name, shape in entries:
            if name in seen:
                raise LayoutMismatch(f"duplicate segment '{name}'")
            seen.add(name)
            segment = Segment(name, offset, tuple(int(s) for s in shape))
            segments.append(segment)
            offset = segment.stop
        self._segments = tuple(segments)
        self._by_name = {s.name: s for s in segments}
        self.size = offset

    @classmethod
    def concat(cls, children: Sequence[Tuple[str, 'ParamLayout']]):
        """Stack child layouts under dotted prefixes."""
        entries = []
        for prefix, child in children:
            entries.extend((f"{prefix}.{s.name}", s.shape) for s in child)
        return cls(entries)

    def __iter__(self) -> Iterator[Segment]:
        return iter(self._segments)

    def __len__(self):
        return len(self._segments)

    def __getitem__(self, name) -> Segment:
        try:
            return self._by_name[name]
        except KeyError:
            raise LayoutMismatch(f"no segment named '{name}'") from None

    def __contains__(self, name):
        return name in self._by_name

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.entries() == other.entries()

    def __hash__(self):
        return hash(self.entries())

    def entries(self):
        return tuple((s.name, s.shape) for s in self._segments)

    def names(self):
        return [s.name for s in self._segments]

    def child(self, prefix):
        """Sub-layout of every segment under ``prefix.``; must be contiguous."""
        head = f"{prefix}."
        picked = [s for s in self._segments if s.name.startswith(head)]
        if not picked:
            return ParamLayout(), 0
        start = picked[0].offset
        if picked[-1].stop - start != sum(s.size for s in picked):
            raise LayoutMismatch(f"segments under '{prefix}' are not contiguous")
        return ParamLayout([(s.name[len(head):], s.shape) for s in picked]), start


class ParamVector:
    """
    Flat array of real parameters plus the layout naming its blocks
    """

    def __init__(self, values, layout: ParamLayout):
        values = np.array(values, dtype=np.float64).reshape(-1)
        if values.shape != (layout.size,):
            raise LayoutMismatch(
                f"parameter array has {values.size} entries, layout expects {layout.size}"
            )
        if not np.all(np.isfinite(values)):
            bad = next(s.name for s in layout if not np.all(np.isfinite(values[s.offset:s.stop])))
            raise NumericFault(bad, "parameters must be finite")
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout: ParamLayout):
        return cls(np.zeros(layout.size), layout)

    @classmethod
    def from_segments(cls, layout: ParamLayout, segments: Dict[str, np.ndarray]):
        values = np.zeros(layout.size)
        for segment in layout:
            block = np.asarray(segments[segment.name], dtype=np.float64)
            if block.size != segment.size:
                raise LayoutMismatch(
                    f"segment '{segment.name}' has {block.size} entries, expected {segment.size}"
                )
            values[segment.offset:segment.stop] = block.reshape(-1)
        return cls(values, layout)

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParamVector(size={self.values.size}, segments={len(self.layout)})"

    def segment(self, name) -> np.ndarray:
        s = self.layout[name]
        return self.values[s.offset:s.stop].reshape(s.shape)

    def segments(self) -> Dict[str, np.ndarray]:
        return {s.name: self.segment(s.name) for s in self.layout}

    def child(self, prefix) -> 'ParamVector':
        layout, start = self.layout.child(prefix)
        return ParamVector(self.values[start:start + layout.size], layout)

    def with_values(self, values) -> 'ParamVector':
        return ParamVector(values, self.layout)

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def check_layout(self, other: 'ParamVector'):
        if self.layout != other.layout:
            raise LayoutMismatch("parameter layouts differ")


# Primitive registry

@dataclass
class Primitive:
    name: str
    forward: Callable
    vjp: Optional[Callable] = None


PRIMITIVES: Dict[str, Primitive] = {}


def defprimitive(name, forward):
    PRIMITIVES[name] = Primitive(name, forward)


def defvjp(name, vjp):
    """``vjp(node, g, needs)`` returns one adjoint Node (or None) per parent."""
    PRIMITIVES[name].vjp = vjp


# Tape and nodes

class Node:
    """
    One recorded value on a tape
    """
    __slots__ = ('tape', 'index', 'op', 'parents', 'attrs', 'value', 'requires_grad', 'scope')

    def __init__(self, tape, index, op, parents, attrs, value, requires_grad, scope):
        self.tape = tape
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.requires_grad = requires_grad
        self.scope = scope

    def __repr__(self):
        return f"Node(#{self.index} {self.op} shape={self.shape})"

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        if isinstance(other, Node):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        # only column slices x[:, a:b] are supported
        if (not isinstance(key, tuple) or len(key) != 2 or key[0] != slice(None)
                or not isinstance(key[1], slice) or key[1].step not in (None, 1)):
            raise UnsupportedPrimitive(f"indexing {key!r}")
        start, stop, _ = key[1].indices(self.shape[1])
        return columns(self, start, stop)


class Tape:
    """
    Topologically ordered record of primitive applications; single use
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._scopes: List[str] = []

    def __len__(self):
        return len(self.nodes)

    @contextmanager
    def scope(self, name):
        """Label nodes built inside the block; numeric faults report the label."""
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()

    @property
    def scope_name(self):
        return '/'.join(self._scopes)

    def _append(self, op, parents, attrs, value, requires_grad):
        node = Node(self, len(self.nodes), op, tuple(parents), attrs, value,
                    requires_grad, self.scope_name)
        self.nodes.append(node)
        return node

    def variable(self, value) -> Node:
        return self._append('variable', (), {}, np.array(value, dtype=np.float64), True)

    def constant(self, value) -> Node:
        return self._append('constant', (), {}, np.array(value, dtype=np.float64), False)

    def apply(self, op, parents, **attrs) -> Node:
        primitive = PRIMITIVES.get(op)
        if primitive is None:
            raise UnsupportedPrimitive(op)
        for parent in parents:
            if parent.tape is not self:
                raise DimensionError(f"operand of '{op}' belongs to another tape")
        with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
            value = primitive.forward(*(p.value for p in parents), **attrs)
        if not np.all(np.isfinite(value)):
            raise NumericFault(self.scope_name or op, f"'{op}' produced a non-finite value")
        requires_grad = any(p.requires_grad for p in parents)
        return self._append(op, parents, attrs, value, requires_grad)

    def replay(self) -> List[np.ndarray]:
        """Recompute every node from its parents' replayed values."""
        values: List[np.ndarray] = []
        for node in self.nodes:
            if not node.parents:
                values.append(node.value)
                continue
            forward = PRIMITIVES[node.op].forward
            with np.errstate(over='ignore', invalid='ignore', divide='ignore'):
                values.append(forward(*(values[p.index] for p in node.parents), **node.attrs))
        return values

    def grad(self, output: Node, wrt: Sequence[Node], seed: Optional[Node] = None,
             create_graph=False) -> List[Node]:
        """
        Adjoints of ``output`` with respect to each node in ``wrt``.

        With ``create_graph`` the returned nodes stay connected to the tape
        and can be differentiated again; otherwise they are constants.
        """
        if seed is None:
            seed = self.constant(np.ones_like(output.value))
        wanted = {node.index for node in wrt}
        found: Dict[int, Node] = {}
        adjoints: Dict[int, Node] = {output.index: seed}
        for index in range(output.index, -1, -1):
            g = adjoints.pop(index, None)
            if g is None:
                continue
            node = self.nodes[index]
            if index in wanted:
                found[index] = g
            if not node.parents:
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            if not any(needs):
                continue
            with self.scope(f"grad:{node.scope or node.op}"):
                contributions = PRIMITIVES[node.op].vjp(node, g, needs)
            for parent, contribution in zip(node.parents, contributions):
                if contribution is None:
                    continue
                previous = adjoints.get(parent.index)
                adjoints[parent.index] = contribution if previous is None else add(previous, contribution)
        results = []
        for node in wrt:
            g = found.get(node.index)
            if g is None:
                g = self.constant(np.zeros_like(node.value))
            elif not create_graph:
                g = self.constant(g.value)
            results.append(g)
        return results


# Primitive operations

def add(a, b):
    _same_shape('add', a, b)
    return a.tape.apply('add', (a, b))


def sub(a, b):
    _same_shape('sub', a, b)
    return a.tape.apply('sub', (a, b))


def mul(a, b):
    _same_shape('mul', a, b)
    return a.tape.apply('mul', (a, b))


def scale(a, c):
    return a.tape.apply('scale', (a,), c=float(c))


def shift(a, c):
    return a.tape.apply('shift', (a,), c=float(c))


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul of {a.shape} and {b.shape}")
    return a.tape.apply('matmul', (a, b))


def transpose(a):
    return a.tape.apply('transpose', (a,))


def relu(a):
    return a.tape.apply('relu', (a,))


def clip_unit(a):
    return a.tape.apply('clip_unit', (a,))


def sum_cols(a):
    return a.tape.apply('sum_cols', (a,))


def broadcast_cols(a, width):
    return a.tape.apply('broadcast_cols', (a,), width=int(width))


def sum_rows(a):
    return a.tape.apply('sum_rows', (a,))


def tile_rows(a, rows):
    return a.tape.apply('tile_rows', (a,), rows=int(rows))


def columns(a, start, stop):
    return a.tape.apply('columns', (a,), start=int(start), stop=int(stop))


def embed_columns(a, start, width):
    return a.tape.apply('embed_columns', (a,), start=int(start), width=int(width))


def segment(theta, offset, shape):
    return theta.tape.apply('segment', (theta,), offset=int(offset), shape=tuple(shape))


def embed_segment(a, offset, total):
    return a.tape.apply('embed_segment', (a,), offset=int(offset), total=int(total))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"'{op}' operands have shapes {a.shape} and {b.shape}")


def _mask(node, array):
    return node.tape.constant(array.astype(np.float64))


def _concat_forward(*parts):
    return np.concatenate(parts, axis=1)


def _embed_columns_forward(a, start, width):
    out = np.zeros((a.shape[0], width))
    out[:, start:start + a.shape[1]] = a
    return out


def _embed_segment_forward(a, offset, total):
    out = np.zeros(total)
    out[offset:offset + a.size] = a.reshape(-1)
    return out


def _huber_forward(a, k):
    magnitude = np.abs(a)
    return np.where(magnitude < k, 0.5 * a * a / k, magnitude - 0.5 * k)


defprimitive('add', lambda a, b: a + b)
defprimitive('sub', lambda a, b: a - b)
defprimitive('mul', lambda a, b: a * b)
defprimitive('scale', lambda a, c: c * a)
defprimitive('shift', lambda a, c: a + c)
defprimitive('matmul', lambda a, b: a @ b)
defprimitive('transpose', lambda a: a.T.copy())
defprimitive('exp', np.exp)
defprimitive('tanh', np.tanh)
defprimitive('sin', np.sin)
defprimitive('cos', np.cos)
defprimitive('relu', lambda a: np.maximum(a, 0.0))
defprimitive('abs', np.abs)
defprimitive('huber', _huber_forward)
defprimitive('clip_unit', lambda a: np.clip(a, -1.0, 1.0))
defprimitive('sum_cols', lambda a: a.sum(axis=1, keepdims=True))
defprimitive('broadcast_cols', lambda a, width: np.repeat(a, width, axis=1))
defprimitive('sum_rows', lambda a: a.sum(axis=0, keepdims=True))
defprimitive('tile_rows', lambda a, rows: np.repeat(a, rows, axis=0))
defprimitive('columns', lambda a, start, stop: a[:, start:stop].copy())
defprimitive('embed_columns', _embed_columns_forward)
defprimitive('concat_cols', _concat_forward)
defprimitive('segment', lambda a, offset, shape: a[offset:offset + int(np.prod(shape))].reshape(shape))
defprimitive('embed_segment', _embed_segment_forward)

defvjp('add', lambda node, g, needs: (g, g))
defvjp('sub', lambda node, g, needs: (g, -g if needs[1] else None))
defvjp('mul', lambda node, g, needs: (
    mul(g, node.parents[1]) if needs[0] else None,
    mul(g, node.parents[0]) if needs[1] else None,
))
defvjp('scale', lambda node, g, needs: (scale(g, node.attrs['c']),))
defvjp('shift', lambda node, g, needs: (g,))
defvjp('matmul', lambda node, g, needs: (
    matmul(g, transpose(node.parents[1])) if needs[0] else None,
    matmul(transpose(node.parents[0]), g) if needs[1] else None,
))
defvjp('transpose', lambda node, g, needs: (transpose(g),))
defvjp('exp', lambda node, g, needs: (mul(g, node),))
# tanh' = 1 - tanh^2, written in terms of the output node
defvjp('tanh', lambda node, g, needs: (sub(g, mul(g, mul(node, node))),))
defvjp('sin', lambda node, g, needs: (mul(g, cos(node.parents[0])),))
defvjp('cos', lambda node, g, needs: (scale(mul(g, sin(node.parents[0])), -1.0),))
# subgradient of max(0, a) at 0 is 0
defvjp('relu', lambda node, g, needs: (mul(g, _mask(node, node.parents[0].value > 0.0)),))
defvjp('abs', lambda node, g, needs: (mul(g, _mask(node, np.sign(node.parents[0].value))),))
defvjp('huber', lambda node, g, needs: (
    mul(g, clip_unit(scale(node.parents[0], 1.0 / node.attrs['k']))),
))
defvjp('clip_unit', lambda node, g, needs: (
    mul(g, _mask(node, np.abs(node.parents[0].value) < 1.0)),
))
defvjp('sum_cols', lambda node, g, needs: (broadcast_cols(g, node.parents[0].shape[1]),))
defvjp('broadcast_cols', lambda node, g, needs: (sum_cols(g),))
defvjp('sum_rows', lambda node, g, needs: (tile_rows(g, node.parents[0].shape[0]),))
defvjp('tile_rows', lambda node, g, needs: (sum_rows(g),))
defvjp('columns', lambda node, g, needs: (
    embed_columns(g, node.attrs['start'], node.parents[0].shape[1]),
))
defvjp('embed_columns', lambda node, g, needs: (
    columns(g, node.attrs['start'], node.attrs['start'] + node.parents[0].shape[1]),
))
defvjp('segment', lambda node, g, needs: (
    embed_segment(g, node.attrs['offset'], node.parents[0].shape[0]),
))
defvjp('embed_segment', lambda node, g, needs: (
    segment(g, node.attrs['offset'], node.parents[0].shape),
))


def _concat_vjp(node, g, needs):
    parts = []
    start = 0
    for parent, need in zip(node.parents, needs):
        stop = start + parent.shape[1]
        parts.append(columns(g, start, stop) if need else None)
        start = stop
    return tuple(parts)


defvjp('concat_cols', _concat_vjp)


# Functions usable on both Nodes and plain arrays.
# Dynamics and target fields are written once against these.

def _unary(op, numpy_fn):
    def apply(x):
        if isinstance(x, Node):
            return x.tape.apply(op, (x,))
        return numpy_fn(np.asarray(x, dtype=np.float64))
    apply.__name__ = op
    return apply


exp = _unary('exp', np.exp)
tanh = _unary('tanh', np.tanh)
sin = _unary('sin', np.sin)
cos = _unary('cos', np.cos)
absolute = _unary('abs', np.abs)


def hinge(x):
    """max(0, x)"""
    if isinstance(x, Node):
        return relu(x)
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def huber(x, k):
    """C1 smooth absolute value: x^2/(2k) inside |x|<k, |x|-k/2 outside."""
    if isinstance(x, Node):
        return x.tape.apply('huber', (x,), k=float(k))
    return _huber_forward(np.asarray(x, dtype=np.float64), float(k))


def concat_cols(parts):
    parts = list(parts)
    if isinstance(parts[0], Node):
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise DimensionError(f"concat_cols row counts differ: {sorted(rows)}")
        return parts[0].tape.apply('concat_cols', tuple(parts))
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=1)


def row_sum(x):
    """Sum over the columns of every row, keeping a (batch, 1) shape."""
    if isinstance(x, Node):
        return sum_cols(x)
    return np.asarray(x).sum(axis=1, keepdims=True)


def inner(a, b):
    return row_sum(a * b)


def squared_norm(a):
    return row_sum(a * a)


def batch_mean(x):
    """Mean over the rows of a (batch, 1) node, as a (1, 1) node."""
    return scale(sum_rows(x), 1.0 / x.shape[0])


# Parameter access on a tape

class ParamView:
    """
    Named segment nodes of a parameter node, cached per tape
    """

    def __init__(self, theta: Node, layout: ParamLayout, prefix='', cache=None):
        self.theta = theta
        self.layout = layout
        self.prefix = prefix
        self._cache = {} if cache is None else cache

    @property
    def tape(self):
        return self.theta.tape

    def __getitem__(self, name) -> Node:
        full = f"{self.prefix}{name}"
        node = self._cache.get(full)
        if node is None:
            s = self.layout[full]
            node = segment(self.theta, s.offset, s.shape)
            self._cache[full] = node
        return node

    def child(self, prefix) -> 'ParamView':
        return ParamView(self.theta, self.layout, f"{self.prefix}{prefix}.", self._cache)


# Public differentiation entry points

def _as_batch(x, width):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"expected input width {width}, got shape {x.shape}")
    return x


def value_and_input_grad(net, params: ParamVector, x):
    """
    Scalar net output and its gradient with respect to the input.

    ``x`` may be one state (returns a float and a vector) or a batch
    (returns per-row values and gradients).
    """
    if net.output_dim != 1:
        raise DimensionError(f"net output has width {net.output_dim}, expected a scalar")
    single = np.ndim(x) == 1
    batch = _as_batch(x, net.input_dim)
    tape = Tape()
    x_node = tape.variable(batch)
    view = ParamView(tape.constant(params.values), params.layout)
    out = net.trace(view, x_node)
    (grad,) = tape.grad(sum_rows(out), [x_node])
    values, grads = out.value[:, 0], grad.value
    if single:
        return float(values[0]), grads[0].copy()
    return values.copy(), grads.copy()


def param_gradients(objective, *params: ParamVector):
    """
    Value and parameter gradients of ``objective(tape, *thetas) -> (1, 1) node``.

    The objective may itself call ``Tape.grad(..., create_graph=True)`` on
    input nodes, which makes the overall derivative second order.
    """
    tape = Tape()
    thetas = [tape.variable(p.values) for p in params]
    out = objective(tape, *thetas)
    if out.value.size != 1:
        raise DimensionError(f"objective must be scalar, got shape {out.shape}")
    grads = tape.grad(out, thetas)
    return float(out.value.reshape(-1)[0]), tuple(
        ParamVector(g.value, p.layout) for g, p in zip(grads, params)
    )


def param_gradient(objective, params: ParamVector) -> ParamVector:
    """dObjective/dtheta for a single parameter vector."""
    _, (grad,) = param_gradients(objective, params)
    return grad


def finite_difference_grad(f, x, h=1e-4):
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad
