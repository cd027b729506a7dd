"""The four forecasting model families behind one parameter abstraction.

* ``linear`` -- flattened window through a single affine map.
* ``dnn`` -- fully connected ReLU hidden layers, linear output head.
* ``lstm`` -- a recurrent cell with forget/input/output gates driving a
  linear head on the final hidden state.
* ``transformer`` -- encoder blocks (causally masked multi-head
  self-attention + pointwise feed-forward, post-norm residuals) with a
  regression head on the final position.

Parameter names and shapes are a pure function of :class:`ModelSpec`, so
two models built from equal specs can be averaged or mixed element-wise.
"""

from __future__ import annotations

import math
import random
from array import array
from dataclasses import dataclass, field

from .tensor import (
    ComputationTape,
    OptimizerState,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    layer_norm_rows,
    matmul,
    mse_loss,
    mul,
    relu,
    reshape,
    scale,
    sgd_step,
    sigmoid,
    softmax_rows,
    sub,
    sum_all,
    take_rows,
    tanh,
    timestep,
    transpose,
)

FAMILIES = ("linear", "dnn", "lstm", "transformer")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; fully determines the parameter layout."""

    family: str
    input_dim: int
    window_len: int
    output_dim: int = 1
    hidden_dims: tuple[int, ...] = ()
    d_model: int = 8
    num_heads: int = 2
    num_layers: int = 2  # encoder blocks (transformer only)

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        for label, v in (("input_dim", self.input_dim),
                         ("window_len", self.window_len),
                         ("output_dim", self.output_dim)):
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{label} must be a positive int, got {v!r}")
        if self.family in ("dnn", "lstm"):
            if not self.hidden_dims:
                raise ValueError(f"{self.family} needs non-empty hidden_dims")
            if any(h < 1 for h in self.hidden_dims):
                raise ValueError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.family == "transformer":
            if self.num_heads < 1 or self.num_layers < 1:
                raise ValueError("num_heads and num_layers must be positive")
            if self.d_model % self.num_heads != 0:
                raise ValueError(
                    f"d_model ({self.d_model}) must divide evenly over "
                    f"{self.num_heads} heads")
            if self.d_model % 2 != 0:
                raise ValueError("d_model must be even (sine/cosine position pairs)")

    @property
    def flat_input(self) -> int:
        return self.window_len * self.input_dim


@dataclass
class ModelParams:
    """Ordered named parameter tensors for one model instance."""

    spec: ModelSpec
    tensors: dict[str, Tensor]

    def names(self) -> tuple[str, ...]:
        return tuple(self.tensors)

    def tensor_list(self) -> list[Tensor]:
        return list(self.tensors.values())

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def clone(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.clone(requires_grad=True)
                                       for k, v in self.tensors.items()})

    def assert_same_structure(self, other: "ModelParams") -> None:
        if self.spec != other.spec:
            raise ShapeError(f"model specs differ: {self.spec} vs {other.spec}")
        if self.names() != other.names():
            raise ShapeError("parameter name lists differ")
        for k in self.tensors:
            if self.tensors[k].shape != other.tensors[k].shape:
                raise ShapeError(
                    f"parameter {k!r} shape differs: "
                    f"{self.tensors[k].shape} vs {other.tensors[k].shape}")


@dataclass
class LstmState:
    """Recurrent cell state: long-term cell values and the hidden output."""

    cell: Tensor
    hidden: Tensor


@dataclass
class TrainStats:
    epoch_losses: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# initialization

def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Deterministic init: matrices ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)),
    biases zero, normalization gains one."""
    rng = random.Random(seed)
    tensors: dict[str, Tensor] = {}

    def mat(name: str, rows: int, cols: int) -> None:
        bound = math.sqrt(1.0 / rows)
        data = [rng.uniform(-bound, bound) for _ in range(rows * cols)]
        tensors[name] = Tensor((rows, cols), data, requires_grad=True, name=name)

    def zeros(name: str, n: int) -> None:
        tensors[name] = Tensor((n,), requires_grad=True, name=name)

    def ones(name: str, n: int) -> None:
        t = Tensor.filled((n,), 1.0, requires_grad=True)
        t.name = name
        tensors[name] = t

    f = spec.family
    if f == "linear":
        mat("w", spec.flat_input, spec.output_dim)
        zeros("b", spec.output_dim)
    elif f == "dnn":
        prev = spec.flat_input
        for i, h in enumerate(spec.hidden_dims):
            mat(f"w{i}", prev, h)
            zeros(f"b{i}", h)
            prev = h
        mat("w_out", prev, spec.output_dim)
        zeros("b_out", spec.output_dim)
    elif f == "lstm":
        hidden = spec.hidden_dims[0]
        joint = hidden + spec.input_dim
        for gate in ("f", "g", "s", "o"):
            mat(f"w_{gate}", joint, hidden)
            zeros(f"b_{gate}", hidden)
        mat("w_head", hidden, spec.output_dim)
        zeros("b_head", spec.output_dim)
    else:  # transformer
        d = spec.d_model
        dh = d // spec.num_heads
        mat("w_in", spec.input_dim, d)
        zeros("b_in", d)
        for l in range(spec.num_layers):
            for h in range(spec.num_heads):
                mat(f"blk{l}.h{h}.wq", d, dh)
                mat(f"blk{l}.h{h}.wk", d, dh)
                mat(f"blk{l}.h{h}.wv", d, dh)
            mat(f"blk{l}.wo", d, d)
            zeros(f"blk{l}.bo", d)
            ones(f"blk{l}.ln1_g", d)
            zeros(f"blk{l}.ln1_b", d)
            mat(f"blk{l}.ffn_w1", d, 4 * d)
            zeros(f"blk{l}.ffn_b1", 4 * d)
            mat(f"blk{l}.ffn_w2", 4 * d, d)
            zeros(f"blk{l}.ffn_b2", d)
            ones(f"blk{l}.ln2_g", d)
            zeros(f"blk{l}.ln2_b", d)
        mat("w_head", d, spec.output_dim)
        zeros("b_head", spec.output_dim)
    return ModelParams(spec, tensors)


# ---------------------------------------------------------------------------
# forward passes

def _flatten_window(spec: ModelSpec, x: Tensor) -> Tensor:
    if len(x.shape) == 3:
        b, w, f = x.shape
        if (w, f) != (spec.window_len, spec.input_dim):
            raise ShapeError(
                f"expected windows of shape (*, {spec.window_len}, "
                f"{spec.input_dim}), got {x.shape}")
        return reshape(x, (b, w * f))
    if len(x.shape) == 2 and x.shape[1] == spec.flat_input:
        return x
    raise ShapeError(f"bad input shape {x.shape} for flat input {spec.flat_input}")


def linear_forward(params: ModelParams, x: Tensor) -> Tensor:
    """Single affine map over the flattened window (identity activation)."""
    t = params.tensors
    x2 = _flatten_window(params.spec, x)
    return add(matmul(x2, t["w"]), t["b"])


def dnn_forward(params: ModelParams, x: Tensor) -> Tensor:
    """Fully connected ReLU hidden layers, linear output head."""
    t = params.tensors
    h = _flatten_window(params.spec, x)
    for i in range(len(params.spec.hidden_dims)):
        h = relu(add(matmul(h, t[f"w{i}"]), t[f"b{i}"]))
    return add(matmul(h, t["w_out"]), t["b_out"])


def lstm_cell_step(params: ModelParams, x_t: Tensor, state: LstmState) -> LstmState:
    """One recurrent step.

    forget = sigmoid(W_f.[h, x] + b_f)    keep = sigmoid(W_g.[h, x] + b_g)
    cand   = tanh   (W_s.[h, x] + b_s)    cell = forget*cell + keep*cand
    out    = sigmoid(W_o.[h, x] + b_o)    hidden = tanh(cell)*out
    """
    t = params.tensors
    hx = concat([state.hidden, x_t], axis=1)
    forget = sigmoid(add(matmul(hx, t["w_f"]), t["b_f"]))
    keep = sigmoid(add(matmul(hx, t["w_g"]), t["b_g"]))
    cand = tanh(add(matmul(hx, t["w_s"]), t["b_s"]))
    cell = add(mul(forget, state.cell), mul(keep, cand))
    out_gate = sigmoid(add(matmul(hx, t["w_o"]), t["b_o"]))
    hidden = mul(tanh(cell), out_gate)
    return LstmState(cell=cell, hidden=hidden)


def lstm_forward(params: ModelParams, x_seq: Tensor) -> Tensor:
    """Run the cell over every timestep, linear head on the final hidden."""
    spec = params.spec
    if len(x_seq.shape) != 3:
        raise ShapeError(f"lstm_forward needs (batch, time, features), got {x_seq.shape}")
    b, steps, feats = x_seq.shape
    if feats != spec.input_dim:
        raise ShapeError(f"expected {spec.input_dim} features, got {feats}")
    hidden = spec.hidden_dims[0]
    state = LstmState(cell=Tensor.zeros((b, hidden)), hidden=Tensor.zeros((b, hidden)))
    for step in range(steps):
        state = lstm_cell_step(params, timestep(x_seq, step), state)
    t = params.tensors
    return add(matmul(state.hidden, t["w_head"]), t["b_head"])


def positional_encoding(window_len: int, d_model: int) -> Tensor:
    """Sinusoidal position features: sin on even columns, cos on odd."""
    if d_model % 2 != 0:
        raise ShapeError(f"d_model must be even, got {d_model}")
    data = array("d", bytes(8 * window_len * d_model))
    for pos in range(window_len):
        base = pos * d_model
        for i in range(d_model // 2):
            angle = pos / (10000.0 ** (2 * i / d_model))
            data[base + 2 * i] = math.sin(angle)
            data[base + 2 * i + 1] = math.cos(angle)
    return Tensor((window_len, d_model), data, validate=False)


def look_ahead_mask(seq_len: int) -> Tensor:
    """Additive causal mask: 0 keeps a position, -inf blocks a future one."""
    data = array("d", bytes(8 * seq_len * seq_len))
    neg = float("-inf")
    for i in range(seq_len):
        for j in range(i + 1, seq_len):
            data[i * seq_len + j] = neg
    return Tensor((seq_len, seq_len), data, validate=False)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: Tensor | None = None) -> Tensor:
    """softmax(Q.K^T / sqrt(d_k) + mask) . V for one head."""
    if len(q.shape) != 2 or len(k.shape) != 2 or len(v.shape) != 2:
        raise ShapeError("attention operands must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key dims differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    if mask is not None:
        if mask.shape != scores.shape:
            raise ShapeError(f"mask shape {mask.shape} != scores {scores.shape}")
        scores = add(scores, mask)
    return matmul(softmax_rows(scores), v)


def _attention_sublayer(params: ModelParams, x2: Tensor, batch: int, seq: int,
                        mask: Tensor | None, block: int) -> Tensor:
    """Multi-head self-attention + residual + layer norm on a flat
    (batch*seq, d_model) tensor."""
    spec = params.spec
    t = params.tensors
    heads = spec.num_heads
    projected = []
    for h in range(heads):
        projected.append((matmul(x2, t[f"blk{block}.h{h}.wq"]),
                          matmul(x2, t[f"blk{block}.h{h}.wk"]),
                          matmul(x2, t[f"blk{block}.h{h}.wv"])))
    samples = []
    for b in range(batch):
        rows = list(range(b * seq, (b + 1) * seq))
        per_head = [scaled_dot_attention(take_rows(q, rows), take_rows(k, rows),
                                         take_rows(v, rows), mask)
                    for q, k, v in projected]
        samples.append(concat(per_head, axis=1) if heads > 1 else per_head[0])
    attended = concat(samples, axis=0) if batch > 1 else samples[0]
    attended = add(matmul(attended, t[f"blk{block}.wo"]), t[f"blk{block}.bo"])
    return layer_norm_rows(add(x2, attended),
                           t[f"blk{block}.ln1_g"], t[f"blk{block}.ln1_b"])


def _feed_forward_sublayer(params: ModelParams, y2: Tensor, block: int) -> Tensor:
    """Pointwise feed-forward (linear, ReLU, linear) + residual + layer norm."""
    t = params.tensors
    h = relu(add(matmul(y2, t[f"blk{block}.ffn_w1"]), t[f"blk{block}.ffn_b1"]))
    out = add(matmul(h, t[f"blk{block}.ffn_w2"]), t[f"blk{block}.ffn_b2"])
    return layer_norm_rows(add(y2, out),
                           t[f"blk{block}.ln2_g"], t[f"blk{block}.ln2_b"])


def multi_head_attention(params: ModelParams, x: Tensor,
                         mask: Tensor | None = None, block: int = 0) -> Tensor:
    """Attention sublayer on (batch, seq, d_model); shape-preserving."""
    if len(x.shape) != 3:
        raise ShapeError(f"multi_head_attention needs 3-D input, got {x.shape}")
    batch, seq, d = x.shape
    if d != params.spec.d_model:
        raise ShapeError(f"expected d_model={params.spec.d_model}, got {d}")
    y2 = _attention_sublayer(params, reshape(x, (batch * seq, d)),
                             batch, seq, mask, block)
    return reshape(y2, (batch, seq, d))


def _encode_flat(params: ModelParams, x_seq: Tensor) -> tuple[Tensor, int, int]:
    spec = params.spec
    if len(x_seq.shape) != 3:
        raise ShapeError(f"transformer needs (batch, time, features), got {x_seq.shape}")
    batch, seq, feats = x_seq.shape
    if feats != spec.input_dim:
        raise ShapeError(f"expected {spec.input_dim} features, got {feats}")
    t = params.tensors
    e = add(matmul(reshape(x_seq, (batch * seq, feats)), t["w_in"]), t["b_in"])
    pe = positional_encoding(seq, spec.d_model)
    tiled = Tensor((batch * seq, spec.d_model), array("d", pe.data * batch),
                   validate=False)
    e = add(e, tiled)
    mask = look_ahead_mask(seq)
    for block in range(spec.num_layers):
        e = _attention_sublayer(params, e, batch, seq, mask, block)
        e = _feed_forward_sublayer(params, e, block)
    return e, batch, seq


def transformer_encode(params: ModelParams, x_seq: Tensor) -> Tensor:
    """Encoder stack output for every position: (batch, seq, d_model)."""
    e, batch, seq = _encode_flat(params, x_seq)
    return reshape(e, (batch, seq, params.spec.d_model))


def transformer_forward(params: ModelParams, x_seq: Tensor) -> Tensor:
    """Forecast from the final position's encoding."""
    e, batch, seq = _encode_flat(params, x_seq)
    last = take_rows(e, [b * seq + seq - 1 for b in range(batch)])
    t = params.tensors
    return add(matmul(last, t["w_head"]), t["b_head"])


_FORWARD = {
    "linear": linear_forward,
    "dnn": dnn_forward,
    "lstm": lstm_forward,
    "transformer": transformer_forward,
}


def predict(params: ModelParams, x: Tensor) -> Tensor:
    """Family-dispatched forward pass."""
    return _FORWARD[params.spec.family](params, x)


def loss_value(params: ModelParams, x: Tensor, y: Tensor) -> float:
    """Mean-squared loss as a plain float (no recording)."""
    return mse_loss(predict(params, x), y).item()


# ---------------------------------------------------------------------------
# training

def batch_plan(n: int, batch_size: int, epochs: int, seed: int) -> list[list[list[int]]]:
    """Deterministic epoch/batch index plan shared by every training loop."""
    rng = random.Random(seed)
    plan = []
    for _ in range(epochs):
        order = list(range(n))
        rng.shuffle(order)
        plan.append([order[i:i + batch_size] for i in range(0, n, batch_size)])
    return plan


def train_epochs(params: ModelParams, data: tuple[Tensor, Tensor], epochs: int,
                 lr: float, batch_size: int, seed: int,
                 momentum: float = 0.0) -> TrainStats:
    """Mini-batch SGD on mean-squared loss; batch order fixed by ``seed``."""
    x, y = data
    if not isinstance(epochs, int) or epochs < 1:
        raise ValueError(f"epochs must be a positive int, got {epochs!r}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    n = x.shape[0]
    if y.shape[0] != n:
        raise ShapeError(f"input/target row counts differ: {n} vs {y.shape[0]}")
    tensors = params.tensor_list()
    opt = OptimizerState(tensors, lr, momentum)
    stats = TrainStats()
    for epoch_batches in batch_plan(n, batch_size, epochs, seed):
        total = 0.0
        for batch in epoch_batches:
            xb = take_rows(x, batch)
            yb = take_rows(y, batch)
            with ComputationTape() as tape:
                loss = mse_loss(predict(params, xb), yb)
                backward(tape, loss)
            sgd_step(tensors, opt)
            total += loss.item() * len(batch)
        stats.epoch_losses.append(total / n)
    return stats
