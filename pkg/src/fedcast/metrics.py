"""Forecast-error metrics and the per-node, per-method comparison report.

mae  = (1/n) sum |T_i - P_i|
mse  = (1/n) sum (T_i - P_i)^2
rmse = sqrt(mse)

Invalid values (NaN, +/-Inf) are sanitized to 0.0 and flagged, so a
report never carries poison but every replaced cell stays auditable.
The report mirrors the five-way comparison layout: method columns
LC | FL | KD | AL | LM, one row per node plus an Average row, one block
per metric.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .tensor import Tensor

METHODS = ("LC", "FL", "KD", "AL", "LM")
METRICS = ("mse", "mae", "rmse")  # block order in emitted tables


def _as_floats(v) -> list[float]:
    if isinstance(v, Tensor):
        return list(v.data)
    return [float(x) for x in v]


def _check_pair(truth, pred) -> tuple[list[float], list[float]]:
    t = _as_floats(truth)
    p = _as_floats(pred)
    if not t or not p:
        raise ValueError("metrics need non-empty vectors")
    if len(t) != len(p):
        raise ValueError(f"length mismatch: {len(t)} truth vs {len(p)} predictions")
    return t, p


def mae(truth, pred) -> float:
    t, p = _check_pair(truth, pred)
    return sum(abs(a - b) for a, b in zip(t, p)) / len(t)


def mse(truth, pred) -> float:
    t, p = _check_pair(truth, pred)
    return sum((a - b) ** 2 for a, b in zip(t, p)) / len(t)


def rmse(truth, pred) -> float:
    return math.sqrt(mse(truth, pred))


def sanitize(value: float) -> tuple[float, bool]:
    """NaN/Inf collapse to 0.0 with a flag; finite values pass through."""
    v = float(value)
    if math.isfinite(v):
        return v, False
    return 0.0, True


@dataclass
class MetricReport:
    """Per-node, per-method metric table with sanitization flags."""

    node_ids: tuple[int, ...]
    rows: dict[int, dict[str, dict[str, float]]] = field(default_factory=dict)
    flags: dict[int, dict[str, dict[str, bool]]] = field(default_factory=dict)

    def add(self, node_id: int, method: str, truth, pred) -> None:
        values = {"mse": mse(truth, pred), "mae": mae(truth, pred),
                  "rmse": rmse(truth, pred)}
        self.add_values(node_id, method, values)

    def add_values(self, node_id: int, method: str,
                   values: dict[str, float],
                   flags: dict[str, bool] | None = None) -> None:
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {method!r}")
        if node_id not in self.node_ids:
            raise ValueError(f"unknown node {node_id}")
        row = self.rows.setdefault(node_id, {})
        frow = self.flags.setdefault(node_id, {})
        clean, fl = {}, {}
        for metric in METRICS:
            v, flagged = sanitize(values[metric])
            clean[metric] = v
            fl[metric] = flagged if flags is None else bool(flags[metric])
        row[method] = clean
        frow[method] = fl

    def value(self, node_id: int, method: str, metric: str) -> float:
        return self.rows[node_id][method][metric]

    def average(self, method: str, metric: str) -> float:
        vals = [self.rows[n][method][metric] for n in self.node_ids]
        return sum(vals) / len(vals)

    def methods_present(self) -> tuple[str, ...]:
        return tuple(m for m in METHODS
                     if all(m in self.rows.get(n, {}) for n in self.node_ids))

    def is_complete(self) -> bool:
        return self.methods_present() == METHODS

    def require_complete(self) -> None:
        if not self.node_ids:
            raise ValueError("report has no nodes")
        missing = [m for m in METHODS if m not in self.methods_present()]
        if missing:
            raise ValueError(f"report incomplete: missing methods {missing}")


def render_csv(report: MetricReport) -> str:
    """Three metric blocks, method columns, node rows plus Average.

    Floats are written with repr(), so re-parsing recovers them exactly.
    """
    report.require_complete()
    lines = ["metric,node," + ",".join(METHODS)]
    for metric in METRICS:
        for n in report.node_ids:
            cells = [repr(report.rows[n][m][metric]) for m in METHODS]
            lines.append(f"{metric.upper()},Node{n}," + ",".join(cells))
        avg = [repr(report.average(m, metric)) for m in METHODS]
        lines.append(f"{metric.upper()},Average," + ",".join(avg))
    return "\n".join(lines) + "\n"


def render_json(report: MetricReport) -> str:
    report.require_complete()
    payload = {
        "methods": list(METHODS),
        "metrics": list(METRICS),
        "nodes": list(report.node_ids),
        "rows": {str(n): report.rows[n] for n in report.node_ids},
        "average": {m: {metric: report.average(m, metric) for metric in METRICS}
                    for m in METHODS},
        "sanitized": {str(n): report.flags[n] for n in report.node_ids},
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
