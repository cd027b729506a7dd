"""Post-federation per-node model personalization.

Three methods consume the frozen global model and one node's local data
and produce an adapted parameter set of identical structure:

* **Active learning** -- iteratively scores a candidate pool with the
  current model, reveals the targets of the most informative samples
  (the stored ground truth stands in for a labeling oracle), and
  fine-tunes on everything labeled so far.
* **Knowledge distillation** -- trains a (same-size or smaller) student
  against a blend of the true targets and the frozen teacher's outputs,
  mixed by a coefficient ``a``; for classification heads the blend is
  the cross-entropy pair (1-a)*CE(labels) + a*CE(teacher distribution),
  and for regression the analogous MSE pair.
* **Local memorization** -- fine-tunes three copies of the global model
  on the node's seen / unseen / representative-local subsets and mixes
  the copies element-wise with convex weights alpha/beta/gamma.

None of the methods ever mutates the global model.
"""

from __future__ import annotations

import math
import random
from array import array
from dataclasses import dataclass, replace

from .backend import kern
from .data import NodeDataset
from .models import (
    ModelParams,
    ModelSpec,
    batch_plan,
    init_params,
    predict,
    train_epochs,
)
from .tensor import (
    ComputationTape,
    OptimizerState,
    Tensor,
    add,
    backward,
    log_softmax_rows,
    mse_loss,
    mul,
    scale,
    sgd_step,
    softmax_rows,
    sum_all,
    take_rows,
)

AL_STRATEGIES = ("uncertainty", "margin", "error_based")


class EmptySubsetError(ValueError):
    """A personalization method needs a data subset that is empty."""


@dataclass(frozen=True)
class ALConfig:
    strategy: str = "error_based"
    pool_size: int = 64
    queries_per_step: int = 8
    steps: int = 4
    epochs_per_step: int = 1
    lr: float = 0.05
    batch_size: int = 16

    def __post_init__(self):
        if self.strategy not in AL_STRATEGIES:
            raise ValueError(
                f"strategy must be one of {AL_STRATEGIES}, got {self.strategy!r}")
        for label, v in (("pool_size", self.pool_size),
                         ("queries_per_step", self.queries_per_step),
                         ("steps", self.steps),
                         ("epochs_per_step", self.epochs_per_step)):
            if v < 1:
                raise ValueError(f"{label} must be >= 1, got {v}")


@dataclass(frozen=True)
class KDConfig:
    mixture: float = 0.5  # a: 0 = labels only, 1 = teacher only
    student_spec: ModelSpec | None = None  # None: same architecture as teacher
    distill_epochs: int = 5
    lr: float = 0.05
    batch_size: int = 32

    def __post_init__(self):
        if not 0.0 <= self.mixture <= 1.0:
            raise ValueError(f"mixture must lie in [0, 1], got {self.mixture}")
        if self.distill_epochs < 1:
            raise ValueError("distill_epochs must be >= 1")


@dataclass(frozen=True)
class LMConfig:
    alpha: float = 0.4  # seen-subset weight
    beta: float = 0.3   # unseen-subset weight
    gamma: float = 0.3  # local-subset weight
    finetune_epochs: int = 3
    lr: float = 0.05
    batch_size: int = 32
    local_fraction: float | None = None  # None: use the node's stored subset
    local_policy: str = "uniform"

    def __post_init__(self):
        for label, c in (("alpha", self.alpha), ("beta", self.beta),
                         ("gamma", self.gamma)):
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"{label} must lie in [0, 1], got {c}")
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-12:
            raise ValueError(
                f"alpha+beta+gamma must equal 1, got "
                f"{self.alpha + self.beta + self.gamma!r}")


@dataclass(frozen=True)
class PersonalizationConfig:
    method: str
    al: ALConfig | None = None
    kd: KDConfig | None = None
    lm: LMConfig | None = None
    seed: int = 0

    def __post_init__(self):
        blocks = {"al": self.al, "kd": self.kd, "lm": self.lm}
        if self.method not in blocks:
            raise ValueError(f"method must be one of {tuple(blocks)}, got {self.method!r}")
        if blocks[self.method] is None:
            object.__setattr__(self, self.method, _DEFAULT_BLOCKS[self.method]())
        active = [name for name, blk in
                  (("al", self.al), ("kd", self.kd), ("lm", self.lm))
                  if blk is not None]
        if active != [self.method]:
            raise ValueError(
                f"exactly the {self.method!r} block may be set, got {active}")

    @classmethod
    def active_learning(cls, seed: int = 0, **kw) -> "PersonalizationConfig":
        return cls(method="al", al=ALConfig(**kw), seed=seed)

    @classmethod
    def knowledge_distillation(cls, seed: int = 0, **kw) -> "PersonalizationConfig":
        return cls(method="kd", kd=KDConfig(**kw), seed=seed)

    @classmethod
    def local_memorization(cls, seed: int = 0, **kw) -> "PersonalizationConfig":
        return cls(method="lm", lm=LMConfig(**kw), seed=seed)

    def with_seed(self, seed: int) -> "PersonalizationConfig":
        return replace(self, seed=seed)


_DEFAULT_BLOCKS = {"al": ALConfig, "kd": KDConfig, "lm": LMConfig}


@dataclass(frozen=True)
class QueryResult:
    """Scored candidate pool: positions of the top-k plus every score."""

    selected: tuple[int, ...]
    scores: tuple[float, ...]


# ---------------------------------------------------------------------------
# active learning

def al_score(params: ModelParams, pool_x: Tensor, strategy: str, k: int = 1,
             targets: Tensor | None = None) -> QueryResult:
    """Score a candidate pool; higher = more informative.

    * ``uncertainty``: 1 - max class probability (softmax over outputs).
    * ``margin``: -(p1 - p2), the negated top-two probability gap.
    * ``error_based``: mean absolute prediction error (needs targets).

    Selection is top-k by score with ties broken toward the lowest index.
    """
    if strategy not in AL_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    n = pool_x.shape[0]
    preds = predict(params, pool_x)
    out_dim = preds.shape[1]

    if strategy in ("uncertainty", "margin"):
        if out_dim < 2:
            raise ValueError(
                f"{strategy} sampling needs a probabilistic head with >= 2 "
                f"outputs, got output_dim={out_dim}")
        probs = softmax_rows(preds)
        scores = []
        for i in range(n):
            row = sorted((probs.data[i * out_dim + j] for j in range(out_dim)),
                         reverse=True)
            if strategy == "uncertainty":
                scores.append(1.0 - row[0])
            else:
                scores.append(-(row[0] - row[1]))
    else:
        if targets is None:
            raise ValueError("error_based sampling needs oracle targets")
        if targets.shape[0] != n:
            raise ValueError(
                f"pool/target row counts differ: {n} vs {targets.shape[0]}")
        scores = []
        for i in range(n):
            err = sum(abs(preds.data[i * out_dim + j] - targets.data[i * out_dim + j])
                      for j in range(out_dim))
            scores.append(err / out_dim)

    if any(not math.isfinite(s) for s in scores):
        raise ValueError("non-finite informativeness score")
    k = min(k, n)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return QueryResult(tuple(order[:k]), tuple(scores))


def al_personalize(global_params: ModelParams, node: NodeDataset,
                   cfg: PersonalizationConfig,
                   report: dict | None = None) -> ModelParams:
    """Query/label/fine-tune loop over the node's unseen candidate pool.

    Selected samples leave the pool; each step retrains on everything
    labeled so far.  If the pool runs dry the loop stops early and the
    optional ``report`` dict records how far it got.
    """
    al = cfg.al
    assert al is not None
    pool = list(node.unseen_idx[:al.pool_size])
    if not pool:
        raise EmptySubsetError(
            f"node {node.node_id}: empty candidate pool for active learning")
    model = global_params.clone()
    labeled: list[int] = []
    selected_per_step: list[list[int]] = []
    steps_done = 0
    for step in range(al.steps):
        if not pool:
            break
        k = min(al.queries_per_step, len(pool))
        px, py = node.subset(pool)
        result = al_score(model, px, al.strategy, k=k,
                          targets=py if al.strategy == "error_based" else None)
        chosen = [pool[i] for i in result.selected]
        drop = set(result.selected)
        pool = [p for i, p in enumerate(pool) if i not in drop]
        labeled.extend(chosen)
        selected_per_step.append(chosen)
        train_epochs(model, node.subset(labeled), epochs=al.epochs_per_step,
                     lr=al.lr, batch_size=al.batch_size,
                     seed=cfg.seed + 1009 * step)
        steps_done += 1
    if report is not None:
        report["steps_completed"] = steps_done
        report["steps_requested"] = al.steps
        report["selected_per_step"] = selected_per_step
        report["pool_remaining"] = len(pool)
    return model


# ---------------------------------------------------------------------------
# knowledge distillation

def _as_label_list(labels, n: int, classes: int) -> list[int]:
    if isinstance(labels, Tensor):
        labels = [int(v) for v in labels.data]
    labels = [int(v) for v in labels]
    if len(labels) != n:
        raise ValueError(f"expected {n} labels, got {len(labels)}")
    if any(not 0 <= y < classes for y in labels):
        raise ValueError(f"labels must lie in [0, {classes})")
    return labels


def kd_losses(student_logits: Tensor, teacher_logits: Tensor, labels,
              a: float) -> Tensor:
    """Blended distillation loss for a classification head.

    (1-a) * CE(one-hot labels, student) + a * CE(teacher distribution,
    student), where the teacher distribution is the softmax of the
    teacher logits, treated as a constant.  The endpoints short-circuit,
    so a=0 is exactly the supervised cross-entropy and a=1 is exactly
    the teacher term (and therefore independent of the labels).
    """
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"mixture coefficient must lie in [0, 1], got {a}")
    if len(student_logits.shape) != 2 or student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"student/teacher logit shapes differ: "
            f"{student_logits.shape} vs {teacher_logits.shape}")
    m, classes = student_logits.shape
    logp = log_softmax_rows(student_logits)

    def supervised() -> Tensor:
        ys = _as_label_list(labels, m, classes)
        onehot = Tensor.zeros((m, classes))
        for i, y in enumerate(ys):
            onehot.data[i * classes + y] = 1.0
        return scale(sum_all(mul(onehot, logp)), -1.0 / m)

    def teacher_term() -> Tensor:
        frozen = Tensor(teacher_logits.shape, array("d", teacher_logits.data))
        q = softmax_rows(frozen)
        return scale(sum_all(mul(q, logp)), -1.0 / m)

    if a == 0.0:
        return supervised()
    if a == 1.0:
        return teacher_term()
    return add(scale(supervised(), 1.0 - a), scale(teacher_term(), a))


def kd_personalize(global_params: ModelParams, node: NodeDataset,
                   cfg: PersonalizationConfig) -> ModelParams:
    """Distill the frozen global model into a student on node-local data.

    Regression variant: the per-batch loss is (1-a)*MSE(student, labels)
    + a*MSE(student, teacher outputs).  With a=0 and the same seed this
    is bit-for-bit plain fine-tuning of the student on the labels.
    """
    kd = cfg.kd
    assert kd is not None
    student_spec = kd.student_spec or global_params.spec
    if (student_spec.input_dim != global_params.spec.input_dim
            or student_spec.window_len != global_params.spec.window_len
            or student_spec.output_dim != global_params.spec.output_dim):
        raise ValueError("student must consume the same windows as the teacher")
    student = init_params(student_spec, cfg.seed)
    teacher_size = global_params.param_count()
    if student.param_count() > teacher_size:
        raise ValueError(
            f"student has {student.param_count()} parameters, exceeding the "
            f"teacher's {teacher_size}")
    x, y = node.train_data()
    if x.shape[0] < 1:
        raise EmptySubsetError(f"node {node.node_id}: no training data to distill on")

    teacher_out = predict(global_params, x)
    frozen = Tensor(teacher_out.shape, array("d", teacher_out.data))

    a = kd.mixture
    tensors = student.tensor_list()
    opt = OptimizerState(tensors, kd.lr)
    for epoch_batches in batch_plan(x.shape[0], kd.batch_size,
                                    kd.distill_epochs, cfg.seed):
        for batch in epoch_batches:
            xb = take_rows(x, batch)
            yb = take_rows(y, batch)
            tb = take_rows(frozen, batch)
            with ComputationTape() as tape:
                pred = predict(student, xb)
                if a == 0.0:
                    loss = mse_loss(pred, yb)
                elif a == 1.0:
                    loss = mse_loss(pred, tb)
                else:
                    loss = add(scale(mse_loss(pred, yb), 1.0 - a),
                               scale(mse_loss(pred, tb), a))
                backward(tape, loss)
            sgd_step(tensors, opt)
    return student


# ---------------------------------------------------------------------------
# local memorization

_LM_SUBSETS = ("seen", "unseen", "local")


def select_local_subset(node: NodeDataset, fraction: float,
                        policy: str = "uniform", seed: int = 0) -> tuple[int, ...]:
    """Pick a representative train subset.

    ``uniform`` draws a seeded sample; ``centroid`` keeps the samples
    whose per-feature window means sit closest to the node's overall
    train mean, which pushes outliers out first.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if policy not in ("uniform", "centroid"):
        raise ValueError(f"policy must be 'uniform' or 'centroid', got {policy!r}")
    train = list(node.train_idx)
    if not train:
        raise EmptySubsetError(f"node {node.node_id}: empty train split")
    count = min(len(train), max(1, int(round(fraction * len(train)))))
    if policy == "uniform":
        rng = random.Random(seed)
        return tuple(sorted(rng.sample(train, count)))

    _, window_len, n_feat = node.windows.shape
    wd = node.windows.data
    means = {}
    for i in train:
        acc = [0.0] * n_feat
        base = i * window_len * n_feat
        for r in range(window_len):
            off = base + r * n_feat
            for j in range(n_feat):
                acc[j] += wd[off + j]
        means[i] = [v / window_len for v in acc]
    center = [sum(means[i][j] for i in train) / len(train) for j in range(n_feat)]
    dist = {i: math.sqrt(sum((means[i][j] - center[j]) ** 2 for j in range(n_feat)))
            for i in train}
    ranked = sorted(train, key=lambda i: (dist[i], i))
    return tuple(sorted(ranked[:count]))


def lm_component_params(global_params: ModelParams, node: NodeDataset,
                        cfg: PersonalizationConfig, which: str) -> ModelParams:
    """The fine-tuned copy of the global model for one LM subset."""
    lm = cfg.lm
    assert lm is not None
    if which == "seen":
        idx = node.seen_idx
    elif which == "unseen":
        idx = node.unseen_idx
    elif which == "local":
        if lm.local_fraction is None:
            idx = node.local_idx
        else:
            idx = select_local_subset(node, lm.local_fraction, lm.local_policy,
                                      seed=cfg.seed)
    else:
        raise ValueError(f"subset must be one of {_LM_SUBSETS}, got {which!r}")
    if not idx:
        raise EmptySubsetError(f"node {node.node_id}: {which} subset is empty")
    component = global_params.clone()
    if lm.finetune_epochs > 0:
        train_epochs(component, node.subset(idx), epochs=lm.finetune_epochs,
                     lr=lm.lr, batch_size=lm.batch_size,
                     seed=cfg.seed + 1 + _LM_SUBSETS.index(which))
    return component


def lm_personalize(global_params: ModelParams, node: NodeDataset,
                   cfg: PersonalizationConfig) -> ModelParams:
    """Convex element-wise mix of subset-fine-tuned copies of the global
    model; subsets with a zero coefficient are neither required nor
    trained, and a single active subset is returned bit-for-bit."""
    lm = cfg.lm
    assert lm is not None
    active = [(coef, which)
              for coef, which in zip((lm.alpha, lm.beta, lm.gamma), _LM_SUBSETS)
              if coef > 0.0]
    components = [(coef, lm_component_params(global_params, node, cfg, which))
                  for coef, which in active]

    mixed: dict[str, Tensor] = {}
    first = components[0][1]
    for name, ref in first.tensors.items():
        n = ref.size
        out = array("d", bytes(8 * n))
        lo = array("d", ref.data)
        hi = array("d", ref.data)
        for coef, comp in components:
            buf = comp.tensors[name].data
            kern.add_scaled(out, buf, coef, n)
            kern.ewise_min(lo, buf, n)
            kern.ewise_max(hi, buf, n)
        kern.clamp_between(out, lo, hi, n)
        mixed[name] = Tensor(ref.shape, out, requires_grad=True, name=name)
    return ModelParams(global_params.spec, mixed)


# ---------------------------------------------------------------------------
# dispatch

def personalize(global_params: ModelParams, node: NodeDataset,
                cfg: PersonalizationConfig) -> ModelParams:
    """Run the configured method; the result always matches the global
    model's structure so personalized models remain fusable."""
    if cfg.method == "kd" and cfg.kd.student_spec is not None \
            and cfg.kd.student_spec != global_params.spec:
        raise ValueError(
            "personalize() keeps the global structure; a differently shaped "
            "student is only available through kd_personalize()")
    if cfg.method == "al":
        return al_personalize(global_params, node, cfg)
    if cfg.method == "kd":
        return kd_personalize(global_params, node, cfg)
    return lm_personalize(global_params, node, cfg)
