"""Dense float64 tensors with tape-based reverse-mode autodiff and SGD.

Every model in the package is expressed through the operations here.
Tensors store a flat row-major ``array('d')`` plus an optional gradient
buffer of the same length.  Recording is explicit: operations executed
inside a ``with ComputationTape() as tape:`` block append nodes to that
tape whenever an input requires gradients, and :func:`backward` replays
the tape once, in reverse, accumulating ``d(loss)/d(leaf)`` into each
leaf's ``grad``.  Outside a tape block the same operations run as plain
math, which is how inference paths stay cheap.

Numeric hygiene: any operation whose result contains NaN or +/-Inf
raises :class:`NumericError` instead of letting the poison spread.  The
single sanctioned exception is ``-inf`` flowing through :func:`add` into
:func:`softmax_rows`, which is how attention masking works; softmax maps
those entries to exactly 0.
"""

from __future__ import annotations

import math
import threading
from array import array
from typing import Callable, Iterable, NamedTuple, Sequence

from .backend import kern


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Invalid tape usage (nesting, reuse, missing loss)."""


class MissingGradError(RuntimeError):
    """A parameter reached the optimizer without a gradient."""


def _prod(shape: tuple[int, ...]) -> int:
    p = 1
    for s in shape:
        p *= s
    return p


def _zeros_buf(n: int) -> array:
    return array("d", bytes(8 * n))


class Tensor:
    """Dense n-dimensional float64 value with an optional gradient slot."""

    __slots__ = ("shape", "data", "grad", "requires_grad", "name")

    def __init__(self, shape, data=None, requires_grad=False, name=None,
                 validate=True):
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"dimensions must be positive, got {shape}")
        n = _prod(shape)
        if data is None:
            data = _zeros_buf(n)
        elif isinstance(data, array) and data.typecode == "d":
            pass
        else:
            data = array("d", data)
        if len(data) != n:
            raise ShapeError(
                f"shape {shape} needs {n} values, got {len(data)}")
        self.shape = shape
        self.data = data
        self.grad: array | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        if validate:
            _check_values(self, allow_neginf=False)

    # -- construction helpers ------------------------------------------------

    @classmethod
    def zeros(cls, shape, requires_grad=False, name=None) -> "Tensor":
        return cls(shape, requires_grad=requires_grad, name=name)

    @classmethod
    def filled(cls, shape, value, requires_grad=False) -> "Tensor":
        t = cls(shape, requires_grad=requires_grad, validate=False)
        kern.fill(t.data, float(value), len(t.data))
        _check_values(t, allow_neginf=False)
        return t

    # -- basics ---------------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self.data)

    def item(self) -> float:
        if len(self.data) != 1:
            raise ShapeError(f"item() needs a single value, shape={self.shape}")
        return self.data[0]

    def tolist(self):
        """Nested-list view of the data (rebuilds Python floats)."""
        def build(dims, off):
            if not dims:
                return self.data[off]
            step = _prod(tuple(dims[1:]))
            return [build(dims[1:], off + i * step) for i in range(dims[0])]
        return build(list(self.shape), 0)

    def clone(self, requires_grad=None) -> "Tensor":
        """Deep copy of the data; gradient slot starts empty."""
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.shape, array("d", self.data), requires_grad=rg,
                      name=self.name, validate=False)

    def _ensure_grad(self) -> array:
        if self.grad is None:
            self.grad = _zeros_buf(len(self.data))
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            kern.fill(self.grad, 0.0, len(self.grad))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad=False, name=None) -> Tensor:
    """Build a Tensor from a scalar or (arbitrarily nested) list."""
    if isinstance(values, (int, float)):
        return Tensor((), [float(values)], requires_grad, name)
    shape = []
    probe = values
    while isinstance(probe, (list, tuple)):
        shape.append(len(probe))
        probe = probe[0]
    flat: list[float] = []

    def walk(v, depth):
        if depth == len(shape):
            flat.append(float(v))
            return
        if len(v) != shape[depth]:
            raise ShapeError("ragged nested list")
        for item in v:
            walk(item, depth + 1)

    walk(values, 0)
    return Tensor(tuple(shape), flat, requires_grad, name)


# ---------------------------------------------------------------------------
# tape

class TapeNode(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[array], None]


_tls = threading.local()


def _active_tape() -> "ComputationTape | None":
    return getattr(_tls, "tape", None)


class ComputationTape:
    """Ordered record of operations for one reverse-mode sweep.

    Nodes are appended in execution order, so topological order holds by
    construction.  A tape is single-use: :func:`backward` marks it
    consumed and a second sweep is rejected rather than silently
    double-accumulating.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False
        self._output_ids: set[int] = set()

    def __enter__(self) -> "ComputationTape":
        if _active_tape() is not None:
            raise TapeError("computation tapes do not nest")
        _tls.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _tls.tape = None

    def _record(self, inputs, output, backward_fn) -> None:
        self.nodes.append(TapeNode(inputs, output, backward_fn))
        self._output_ids.add(id(output))


def _finish(out: Tensor, inputs: tuple[Tensor, ...],
            backward_fn: Callable[[array], None],
            allow_neginf: bool = False) -> Tensor:
    """Validate an op result and record it on the active tape."""
    _check_values(out, allow_neginf)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = _active_tape()
        if tape is not None:
            tape._record(inputs, out, backward_fn)
    return out


def _check_values(t: Tensor, allow_neginf: bool) -> None:
    if kern.count_bad(t.data, len(t.data), allow_neginf):
        raise NumericError(
            f"non-finite values in tensor of shape {t.shape}"
            f"{' (name=' + t.name + ')' if t.name else ''}")


# ---------------------------------------------------------------------------
# operations

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = Tensor((m, n), validate=False)
    kern.matmul(a.data, b.data, out.data, m, k, n)

    def backward_fn(dy: array) -> None:
        if a.requires_grad:
            kern.matmul_tb_acc(dy, b.data, a._ensure_grad(), m, n, k)
        if b.requires_grad:
            kern.matmul_ta_acc(a.data, dy, b._ensure_grad(), m, k, n)

    return _finish(out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a row-broadcast bias ([m,n] + [n]).

    This is the one op that tolerates -inf in its result, so that
    attention masks can be added onto score matrices.
    """
    if a.shape == b.shape:
        n = len(a.data)
        out = Tensor(a.shape, validate=False)
        kern.add(a.data, b.data, out.data, n)

        def backward_fn(dy: array) -> None:
            if a.requires_grad:
                kern.accumulate(a._ensure_grad(), dy, n)
            if b.requires_grad:
                kern.accumulate(b._ensure_grad(), dy, n)

        return _finish(out, (a, b), backward_fn, allow_neginf=True)

    if len(a.shape) == 2 and len(b.shape) == 1 and a.shape[1] == b.shape[0]:
        m, n = a.shape
        out = Tensor(a.shape, validate=False)
        kern.add_bias(a.data, b.data, out.data, m, n)

        def backward_fn(dy: array) -> None:
            if a.requires_grad:
                kern.accumulate(a._ensure_grad(), dy, m * n)
            if b.requires_grad:
                kern.col_sums_acc(dy, b._ensure_grad(), m, n)

        return _finish(out, (a, b), backward_fn, allow_neginf=True)

    raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes incompatible: {a.shape} - {b.shape}")
    n = len(a.data)
    out = Tensor(a.shape, validate=False)
    kern.sub(a.data, b.data, out.data, n)

    def backward_fn(dy: array) -> None:
        if a.requires_grad:
            kern.accumulate(a._ensure_grad(), dy, n)
        if b.requires_grad:
            kern.add_scaled(b._ensure_grad(), dy, -1.0, n)

    return _finish(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard (elementwise) product."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}")
    n = len(a.data)
    out = Tensor(a.shape, validate=False)
    kern.mul(a.data, b.data, out.data, n)

    def backward_fn(dy: array) -> None:
        if a.requires_grad:
            kern.mul_acc(dy, b.data, a._ensure_grad(), n)
        if b.requires_grad:
            kern.mul_acc(dy, a.data, b._ensure_grad(), n)

    return _finish(out, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    c = float(c)
    if not math.isfinite(c):
        raise NumericError(f"scale factor must be finite, got {c}")
    n = len(a.data)
    out = Tensor(a.shape, validate=False)
    kern.scale(a.data, c, out.data, n)

    def backward_fn(dy: array) -> None:
        if a.requires_grad:
            kern.add_scaled(a._ensure_grad(), dy, c, n)

    return _finish(out, (a,), backward_fn)


ACTIVATIONS = ("linear", "relu", "sigmoid", "tanh")


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation; ``linear`` is the identity."""
    if kind == "linear":
        return x
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    n = len(x.data)
    out = Tensor(x.shape, validate=False)
    if kind == "relu":
        kern.relu(x.data, out.data, n)

        def backward_fn(dy: array) -> None:
            kern.relu_bwd(x.data, dy, x._ensure_grad(), n)
    elif kind == "sigmoid":
        kern.sigmoid(x.data, out.data, n)

        def backward_fn(dy: array) -> None:
            kern.sigmoid_bwd(out.data, dy, x._ensure_grad(), n)
    else:  # tanh
        kern.tanh_(x.data, out.data, n)

        def backward_fn(dy: array) -> None:
            kern.tanh_bwd(out.data, dy, x._ensure_grad(), n)

    return _finish(out, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; -inf inputs map to exact 0."""
    if len(x.shape) != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    m, n = x.shape
    out = Tensor(x.shape, validate=False)
    if kern.softmax_rows(x.data, out.data, m, n):
        raise NumericError("softmax row with every entry masked to -inf")

    def backward_fn(dy: array) -> None:
        kern.softmax_rows_bwd(out.data, dy, x._ensure_grad(), m, n)

    return _finish(out, (x,), backward_fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    """Row-wise log-softmax via logsumexp (never produces -inf on finite input)."""
    if len(x.shape) != 2:
        raise ShapeError(f"log_softmax_rows needs a 2-D tensor, got {x.shape}")
    _check_values(x, allow_neginf=False)
    m, n = x.shape
    out = Tensor(x.shape, validate=False)
    kern.log_softmax_rows(x.data, out.data, m, n)

    def backward_fn(dy: array) -> None:
        kern.log_softmax_rows_bwd(out.data, dy, x._ensure_grad(), m, n)

    return _finish(out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, returned as a scalar tensor (shape ())."""
    n = len(x.data)
    out = Tensor((), [kern.sum_all(x.data, n)], validate=False)

    def backward_fn(dy: array) -> None:
        kern.add_scalar_acc(x._ensure_grad(), dy[0], n)

    return _finish(out, (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / len(x.data))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every entry (scalar tensor)."""
    if pred.shape != target.shape:
        raise ShapeError(
            f"mse_loss shapes incompatible: {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return mean_all(mul(d, d))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if _prod(shape) != len(x.data):
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(shape, array("d", x.data), validate=False)

    def backward_fn(dy: array) -> None:
        kern.accumulate(x._ensure_grad(), dy, len(x.data))

    return _finish(out, (x,), backward_fn)


def transpose(x: Tensor) -> Tensor:
    if len(x.shape) != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")
    m, n = x.shape
    out = Tensor((n, m), validate=False)
    kern.transpose(x.data, out.data, m, n)

    def backward_fn(dy: array) -> None:
        kern.transpose_acc(dy, x._ensure_grad(), n, m)

    return _finish(out, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate 2-D tensors along rows (axis 0) or columns (axis 1)."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat of zero tensors")
    if any(len(t.shape) != 2 for t in ts):
        raise ShapeError("concat needs 2-D tensors")
    if axis == 0:
        cols = ts[0].shape[1]
        if any(t.shape[1] != cols for t in ts):
            raise ShapeError("concat axis 0 needs equal column counts")
        rows = sum(t.shape[0] for t in ts)
        out = Tensor((rows, cols), validate=False)
        off = 0
        offsets = []
        for t in ts:
            offsets.append(off)
            kern.copy_block(t.data, 0, out.data, off, len(t.data))
            off += len(t.data)

        def backward_fn(dy: array) -> None:
            for t, o in zip(ts, offsets):
                if t.requires_grad:
                    kern.acc_block(dy, o, t._ensure_grad(), 0, len(t.data))

        return _finish(out, tuple(ts), backward_fn, allow_neginf=True)

    if axis == 1:
        rows = ts[0].shape[0]
        if any(t.shape[0] != rows for t in ts):
            raise ShapeError("concat axis 1 needs equal row counts")
        widths = [t.shape[1] for t in ts]
        total = sum(widths)
        out = Tensor((rows, total), validate=False)
        col_off = 0
        offsets = []
        for t, w in zip(ts, widths):
            offsets.append(col_off)
            for r in range(rows):
                kern.copy_block(t.data, r * w, out.data, r * total + col_off, w)
            col_off += w

        def backward_fn(dy: array) -> None:
            for t, w, o in zip(ts, widths, offsets):
                if t.requires_grad:
                    g = t._ensure_grad()
                    for r in range(rows):
                        kern.acc_block(dy, r * total + o, g, r * w, w)

        return _finish(out, tuple(ts), backward_fn, allow_neginf=True)

    raise ShapeError(f"concat axis must be 0 or 1, got {axis}")


def _gather(x: Tensor, row_indices: Sequence[int], row_len: int,
            out_shape: tuple[int, ...], n_rows_in: int) -> Tensor:
    idx = array("q", [int(i) for i in row_indices])
    for i in idx:
        if i < 0 or i >= n_rows_in:
            raise ShapeError(f"row index {i} out of range [0, {n_rows_in})")
    rows = len(idx)
    out = Tensor(out_shape, validate=False)
    kern.gather_rows(x.data, idx, out.data, rows, row_len)

    def backward_fn(dy: array) -> None:
        kern.scatter_rows_acc(dy, idx, x._ensure_grad(), rows, row_len)

    return _finish(out, (x,), backward_fn)


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows along the first axis (used for mini-batching and splits)."""
    if len(x.shape) < 2:
        raise ShapeError(f"take_rows needs at least 2 dims, got {x.shape}")
    if len(indices) == 0:
        raise ShapeError("take_rows of zero indices")
    row_len = _prod(x.shape[1:])
    out_shape = (len(indices),) + x.shape[1:]
    return _gather(x, indices, row_len, out_shape, x.shape[0])


def timestep(x_seq: Tensor, t: int) -> Tensor:
    """Slice step ``t`` out of a [batch, time, features] tensor."""
    if len(x_seq.shape) != 3:
        raise ShapeError(f"timestep needs a 3-D tensor, got {x_seq.shape}")
    b, steps, feats = x_seq.shape
    if not 0 <= t < steps:
        raise ShapeError(f"timestep {t} out of range [0, {steps})")
    rows = [i * steps + t for i in range(b)]
    return _gather(x_seq, rows, feats, (b, feats), b * steps)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization to mean 0 / variance 1, then learned affine."""
    if len(x.shape) != 2:
        raise ShapeError(f"layer_norm_rows needs a 2-D tensor, got {x.shape}")
    m, n = x.shape
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({n},), got "
            f"{gain.shape} / {bias.shape}")
    out = Tensor(x.shape, validate=False)
    xhat = _zeros_buf(m * n)
    inv_sd = _zeros_buf(m)
    kern.layer_norm_rows(x.data, gain.data, bias.data, out.data, xhat, inv_sd, m, n)

    def backward_fn(dy: array) -> None:
        dx = x._ensure_grad() if x.requires_grad else _zeros_buf(m * n)
        dg = gain._ensure_grad() if gain.requires_grad else _zeros_buf(n)
        db = bias._ensure_grad() if bias.requires_grad else _zeros_buf(n)
        kern.layer_norm_rows_bwd(dy, gain.data, xhat, inv_sd, dx, dg, db, m, n)

    return _finish(out, (x, gain, bias), backward_fn)


# ---------------------------------------------------------------------------
# reverse sweep

def backward(tape: ComputationTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's ``grad``."""
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")
    if not tape.nodes:
        raise TapeError("backward on an empty tape")
    if _prod(loss.shape) != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._output_ids:
        raise TapeError("loss tensor was not produced under this tape")
    g = loss._ensure_grad()
    kern.fill(g, 1.0, 1)
    for node in reversed(tape.nodes):
        dy = node.output.grad
        if dy is None:
            continue  # branch that never reached the loss
        node.backward(dy)
    tape.consumed = True


# ---------------------------------------------------------------------------
# optimizer

class OptimizerState:
    """Plain SGD with optional classical momentum.

    Velocities are kept positionally aligned with the parameter list the
    state was created from.
    """

    def __init__(self, params: Iterable[Tensor], learning_rate: float,
                 momentum: float = 0.0):
        params = list(params)
        if not params:
            raise ValueError("optimizer needs at least one parameter")
        if not (learning_rate > 0 and math.isfinite(learning_rate)):
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.velocity = [_zeros_buf(len(p.data)) for p in params]
        self._n_params = len(params)

    def check_match(self, params: Sequence[Tensor]) -> None:
        if len(params) != self._n_params:
            raise ValueError(
                f"optimizer state holds {self._n_params} parameters, "
                f"got {len(params)}")
        for p, v in zip(params, self.velocity):
            if len(v) != len(p.data):
                raise ValueError("velocity/parameter length mismatch")


def sgd_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """v <- momentum*v + grad; p <- p - lr*v; gradients zeroed afterward."""
    params = list(params)
    state.check_match(params)
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name if p.name else f"parameter #{i}"
            raise MissingGradError(f"{label} has no gradient; run backward() first")
    for p, v in zip(params, state.velocity):
        kern.sgd_update(p.data, p.grad, v, state.learning_rate,
                        state.momentum, len(p.data))
        _check_values(p, allow_neginf=False)
        kern.fill(p.grad, 0.0, len(p.grad))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
