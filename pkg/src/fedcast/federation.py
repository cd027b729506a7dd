"""Centralized federated-learning simulation.

A coordinator holds the global model; each simulated client copies it,
trains on its own ``seen`` subset, and hands back only a parameter
snapshot plus its sample count.  The coordinator fuses snapshots with a
data-size weighted element-wise average.  Rounds are atomic: if any
client fails, the global model is left untouched.

Raw client rows never cross the aggregation boundary; the fusion step
consumes (parameters, sample-count) pairs and nothing else.
"""

from __future__ import annotations

import time
from array import array
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .backend import kern
from .data import NodeDataset
from .models import ModelParams, ModelSpec, TrainStats, init_params, train_epochs
from .params_io import save_params
from .tensor import Tensor


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 10
    local_epochs: int = 2
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")


@dataclass
class ClientHandle:
    node_id: int
    dataset: NodeDataset
    local_params: ModelParams | None = None

    @property
    def sample_count(self) -> int:
        # |D_i|: the samples this client actually trains on
        return len(self.dataset.seen_idx)


@dataclass
class RoundReport:
    round_index: int
    client_losses: dict[int, list[float]]
    agg_seconds: float
    snapshot: str | None = None


@dataclass
class FederationSession:
    spec: ModelSpec
    global_params: ModelParams
    clients: list[ClientHandle]
    config: FederationConfig
    round: int = 0
    snapshot_dir: Path | None = None
    reports: list[RoundReport] = field(default_factory=list)

    @classmethod
    def create(cls, spec: ModelSpec, node_datasets: list[NodeDataset],
               config: FederationConfig, init_seed: int,
               snapshot_dir=None) -> "FederationSession":
        if not node_datasets:
            raise ValueError("a federation needs at least one client")
        clients = [ClientHandle(d.node_id, d) for d in node_datasets]
        for c in clients:
            if c.sample_count < 1:
                raise ValueError(f"client {c.node_id} has no training samples")
        return cls(spec=spec, global_params=init_params(spec, init_seed),
                   clients=clients, config=config,
                   snapshot_dir=Path(snapshot_dir) if snapshot_dir else None)


def derive_seed(base: int, round_idx: int, node_id: int) -> int:
    """Stable per-(round, client) training seed."""
    return (base * 1_000_003 + round_idx * 10_007 + node_id) % (1 << 62)


def federated_average(client_params: list[tuple[ModelParams, float]]) -> ModelParams:
    """Element-wise weighted mean of structurally identical parameter sets.

    Weights are the clients' sample counts.  Each fused element is the
    convex combination sum_i (D_i / sum D) * w_i, then snapped into the
    element-wise [min_i w_i, max_i w_i] hull, so float rounding can never
    push an aggregate outside the range its inputs span.
    """
    if not client_params:
        raise ValueError("federated_average needs at least one client")
    for _, w in client_params:
        if not w > 0:
            raise ValueError(f"client weights must be positive, got {w}")
    total = float(sum(w for _, w in client_params))
    if not total > 0:
        raise ValueError("total client weight must be positive")
    first = client_params[0][0]
    for p, _ in client_params[1:]:
        first.assert_same_structure(p)

    fused: dict[str, Tensor] = {}
    for name, ref in first.tensors.items():
        n = ref.size
        out = array("d", bytes(8 * n))
        lo = array("d", ref.data)
        hi = array("d", ref.data)
        for p, w in client_params:
            buf = p.tensors[name].data
            kern.add_scaled(out, buf, w / total, n)
            kern.ewise_min(lo, buf, n)
            kern.ewise_max(hi, buf, n)
        kern.clamp_between(out, lo, hi, n)
        fused[name] = Tensor(ref.shape, out, requires_grad=True, name=name)
    return ModelParams(first.spec, fused)


def _client_update(client: ClientHandle, global_params: ModelParams,
                   config: FederationConfig,
                   round_idx: int) -> tuple[ModelParams, TrainStats, int]:
    params = global_params.clone()
    stats = train_epochs(params, client.dataset.seen_data(),
                         epochs=config.local_epochs, lr=config.lr,
                         batch_size=config.batch_size,
                         seed=derive_seed(config.seed, round_idx, client.node_id))
    return params, stats, client.sample_count


def run_round(session: FederationSession, jobs: int = 1) -> RoundReport:
    """One federation round: dispatch, local training, fusion.

    All clients must succeed before the global model is replaced; a
    client failure propagates and leaves the session untouched.
    """
    cfg = session.config
    round_idx = session.round
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(
                lambda c: _client_update(c, session.global_params, cfg, round_idx),
                session.clients))
    else:
        results = [_client_update(c, session.global_params, cfg, round_idx)
                   for c in session.clients]

    t0 = time.perf_counter()
    fused = federated_average([(params, weight) for params, _, weight in results])
    agg_seconds = time.perf_counter() - t0

    for client, (params, _, _) in zip(session.clients, results):
        client.local_params = params
    session.global_params = fused
    session.round += 1

    snapshot = None
    if session.snapshot_dir is not None:
        session.snapshot_dir.mkdir(parents=True, exist_ok=True)
        path = session.snapshot_dir / f"round_{session.round}.params"
        save_params(fused, path)
        snapshot = str(path)

    report = RoundReport(
        round_index=session.round,
        client_losses={c.node_id: r[1].epoch_losses
                       for c, r in zip(session.clients, results)},
        agg_seconds=agg_seconds,
        snapshot=snapshot)
    session.reports.append(report)
    return report


def run_session(session: FederationSession,
                jobs: int = 1) -> tuple[list[RoundReport], ModelParams]:
    """Run the configured number of rounds; returns reports and the final
    global model."""
    reports = [run_round(session, jobs=jobs) for _ in range(session.config.rounds)]
    return reports, session.global_params
