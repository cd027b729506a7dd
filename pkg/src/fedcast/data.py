"""Dataset ingestion, synthetic generation, windowing, and per-node splits.

The built-in schemas mirror five real deployments (stable sensors, field
sensors, smart meters, building management, daily product sales), each
with its production node count.  Synthetic generators produce per-node
series from shared seasonal components plus node-specific baseline and
phase shifts, so a positive ``node_shift_scale`` yields the non-IID
setting that makes per-node personalization worthwhile.

Supervised samples are sliding windows of consecutive rows; the target
is the configured column ``horizon`` steps after the window.  Splits are
chronological (test = most recent) and min-max normalization is fitted
on the train split only.
"""

from __future__ import annotations

import csv
import math
import random
from array import array
from dataclasses import dataclass, replace
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

from .tensor import Tensor, take_rows


class DataError(ValueError):
    """Unusable input data (missing columns, bad cells, undersized splits)."""


@dataclass(frozen=True)
class DatasetSchema:
    name: str
    feature_names: tuple[str, ...]
    target_name: str
    node_count: int

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError(f"{self.name}: duplicate feature names")
        if self.target_name not in self.feature_names:
            raise DataError(
                f"{self.name}: target {self.target_name!r} not among features")
        if self.node_count < 1:
            raise DataError(f"{self.name}: node_count must be positive")

    @property
    def target_col(self) -> int:
        return self.feature_names.index(self.target_name)

    def with_target(self, target_name: str) -> "DatasetSchema":
        return replace(self, target_name=target_name)


BUILTIN_SCHEMAS: dict[str, DatasetSchema] = {
    "animal_welfare": DatasetSchema(
        "animal_welfare",
        ("DateTime", "Air Humidity", "Air Temp", "Ch4", "CO2 Avg", "CO2 Max",
         "CO2 Min", "Counter", "Dew Point Temp"),
        "Ch4", 2),
    "animal_feed": DatasetSchema(
        "animal_feed",
        ("DateTime", "Air Humidity", "Air Pressure", "Air Temperature",
         "Battery", "Counter", "Dew Point Temp", "Volumetric WC", "Soil Temp"),
        "Air Humidity", 6),
    "electricity_meter": DatasetSchema(
        "electricity_meter",
        ("eventDate", "VAR_S", "PF_L1", "PF_L2", "VA_S", "PF_L3", "V_L2_N",
         "VA_L2", "V_L3_N", "VA_L3", "V_L1_N", "VA_L1", "VAR_L3", "VAR_L2",
         "W_L1", "VAR_L1", "W_L2", "W_L3", "W_S", "Wh_S", "PF_S", "Hz",
         "A_L2", "A_L3", "A_L1", "VArh_Ind_S", "VArh_Cap_S"),
        "W_S", 2),
    "smart_building": DatasetSchema(
        "smart_building",
        ("eventDate", "setTemp", "operationMode", "userControl", "fanSpeed",
         "tempAct", "status", "accumulatedPower", "dimming", "luminance",
         "temperature", "humidity", "gustWindSpeed", "averageWindSpeed",
         "airTemperature", "solarRadiation", "airHumidity", "windDirection"),
        "temperature", 2),
    "dairy_sales": DatasetSchema(
        "dairy_sales",
        ("Day", "Month", "Year", "Daily Sales", "Daily Sales (Previous Year)",
         "Daily Sales (percentage difference)", "Daily Sales KG",
         "Daily Sales KG (Previous Year)",
         "Daily Sales KG (percentage difference)", "Daily Returns KG",
         "Daily Returns KG (Previous Year)", "Points of Distribution",
         "Points of Distribution (Previous Year)"),
        "Daily Sales", 7),
}

_TIME_SINGLE = ("DateTime", "eventDate")
_TIME_TRIPLET = ("Day", "Month", "Year")


@dataclass
class RawTable:
    """One node's raw series: schema-ordered columns, rows sorted by time."""

    schema: DatasetSchema
    columns: dict[str, list[float]]

    @property
    def n_rows(self) -> int:
        return len(self.columns[self.schema.feature_names[0]])

    def column(self, name: str) -> list[float]:
        return self.columns[name]


def _time_kind(schema: DatasetSchema) -> tuple[str, tuple[str, ...]]:
    for name in _TIME_SINGLE:
        if name in schema.feature_names:
            return "single", (name,)
    if all(n in schema.feature_names for n in _TIME_TRIPLET):
        return "triplet", _TIME_TRIPLET
    return "none", ()


def _parse_time_cell(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError:
        raise ValueError(f"cannot parse {text!r} as epoch seconds or ISO-8601")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def load_csv(path, schema: DatasetSchema) -> RawTable:
    """Parse one CSV file into a time-sorted table in schema column order.

    The header may permute the schema's columns but must contain exactly
    them.  Timestamp columns accept epoch seconds or ISO-8601 strings and
    are stored as epoch floats; day/month/year triplets stay as separate
    numeric features and are composed only for ordering.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file")
        have = set(header)
        want = set(schema.feature_names)
        missing = sorted(want - have)
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        extra = sorted(have - want)
        if extra:
            raise DataError(f"{path}: unexpected columns {extra}")
        col_at = {name: header.index(name) for name in schema.feature_names}
        kind, time_cols = _time_kind(schema)
        rows: list[list[float]] = []
        for row_no, cells in enumerate(reader, start=2):
            if not cells:
                continue
            parsed = []
            for name in schema.feature_names:
                text = cells[col_at[name]].strip()
                try:
                    if kind == "single" and name == time_cols[0]:
                        parsed.append(_parse_time_cell(text))
                    else:
                        parsed.append(float(text))
                except ValueError:
                    raise DataError(
                        f"{path}: unparsable cell at row {row_no}, "
                        f"column {name!r}: {text!r}")
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")

    if kind == "single":
        t_idx = schema.feature_names.index(time_cols[0])
        rows.sort(key=lambda r: r[t_idx])
    elif kind == "triplet":
        d_i, m_i, y_i = (schema.feature_names.index(n) for n in _TIME_TRIPLET)

        def epoch(r):
            try:
                stamp = datetime(int(r[y_i]), int(r[m_i]), int(r[d_i]),
                                 tzinfo=timezone.utc)
            except ValueError as exc:
                raise DataError(f"{path}: bad calendar triplet: {exc}")
            return stamp.timestamp()

        rows.sort(key=epoch)

    columns = {name: [r[i] for r in rows]
               for i, name in enumerate(schema.feature_names)}
    return RawTable(schema, columns)


def write_csv(table: RawTable, path) -> None:
    """Write a table back out in the same CSV dialect load_csv accepts."""
    names = table.schema.feature_names
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(table.n_rows):
            writer.writerow([repr(table.columns[n][i]) for n in names])


# ---------------------------------------------------------------------------
# synthetic generation

@dataclass(frozen=True)
class SyntheticConfig:
    seed: int
    records_per_node: int = 400
    seasonality_periods: tuple[float, ...] = (24.0, 168.0)
    noise_std: float = 0.05
    node_shift_scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "seasonality_periods",
                           tuple(float(p) for p in self.seasonality_periods))
        if self.records_per_node < 3:
            raise DataError("records_per_node must be at least 3")
        if self.noise_std < 0 or self.node_shift_scale < 0:
            raise DataError("noise_std and node_shift_scale must be >= 0")
        if any(p <= 0 for p in self.seasonality_periods):
            raise DataError("seasonality periods must be positive")


_EPOCH0 = 1_600_000_000.0  # synthetic series start
_START_DAY = date(2020, 1, 1)


def generate_synthetic(schema: DatasetSchema, cfg: SyntheticConfig) -> list[RawTable]:
    """Per-node seasonal series with node-specific baseline/phase shifts.

    value(t) = base + shift*u + sum_p amp_p * sin(2 pi t / p + phase + shift*v)
               + gauss(0, noise_std)

    where u, v are per-(node, feature) standard normals.  All draws come
    from one seeded generator in fixed order, so equal configs reproduce
    byte-identical tables and a zero shift/noise config makes every node
    identical.
    """
    rng = random.Random(cfg.seed)
    kind, time_cols = _time_kind(schema)
    value_features = [n for n in schema.feature_names if n not in time_cols]
    periods = cfg.seasonality_periods

    base = {f: rng.uniform(0.0, 10.0) for f in value_features}
    amp = {f: [rng.uniform(0.3, 1.0) for _ in periods] for f in value_features}
    phase = {f: rng.uniform(0.0, 2.0 * math.pi) for f in value_features}

    tables = []
    for _node in range(schema.node_count):
        shift_u = {f: rng.gauss(0.0, 1.0) for f in value_features}
        shift_v = {f: rng.gauss(0.0, 1.0) for f in value_features}
        columns: dict[str, list[float]] = {n: [] for n in schema.feature_names}
        for t in range(cfg.records_per_node):
            if kind == "single":
                columns[time_cols[0]].append(_EPOCH0 + 3600.0 * t)
            elif kind == "triplet":
                day = _START_DAY + timedelta(days=t)
                columns["Day"].append(float(day.day))
                columns["Month"].append(float(day.month))
                columns["Year"].append(float(day.year))
            for f in value_features:
                v = base[f] + cfg.node_shift_scale * shift_u[f]
                ph = phase[f] + cfg.node_shift_scale * shift_v[f]
                for p, a in zip(periods, amp[f]):
                    v += a * math.sin(2.0 * math.pi * t / p + ph)
                v += cfg.noise_std * rng.gauss(0.0, 1.0)
                columns[f].append(v)
        tables.append(RawTable(schema, columns))
    return tables


# ---------------------------------------------------------------------------
# windowing & normalization

def make_windows(table: RawTable, window_len: int, target_name: str,
                 horizon: int = 1) -> tuple[Tensor, Tensor]:
    """Sliding windows of consecutive rows plus the forecast target.

    Sample i covers rows [i, i+window_len); its target is the target
    column at row i + window_len + horizon - 1.
    """
    if window_len < 1 or horizon < 1:
        raise DataError("window_len and horizon must be positive")
    names = table.schema.feature_names
    if target_name not in names:
        raise DataError(f"target {target_name!r} not in schema {table.schema.name}")
    rows = table.n_rows
    count = rows - window_len - horizon + 1
    if count < 1:
        raise DataError(
            f"too few rows: {rows} rows cannot produce a "
            f"window_len={window_len}, horizon={horizon} sample")
    n_feat = len(names)
    cols = [table.columns[n] for n in names]
    target_col = table.columns[target_name]

    wdata = array("d", bytes(8 * count * window_len * n_feat))
    tdata = array("d", bytes(8 * count))
    pos = 0
    for i in range(count):
        for r in range(i, i + window_len):
            for c in cols:
                wdata[pos] = c[r]
                pos += 1
        tdata[i] = target_col[i + window_len + horizon - 1]
    windows = Tensor((count, window_len, n_feat), wdata)
    targets = Tensor((count, 1), tdata)
    return windows, targets


@dataclass
class NormParams:
    """Per-feature min/max fitted on the train split."""

    mins: tuple[float, ...]
    maxs: tuple[float, ...]
    target_col: int

    def scale_feature(self, col: int, v: float) -> float:
        lo, hi = self.mins[col], self.maxs[col]
        if hi == lo:
            return 0.0
        s = (v - lo) / (hi - lo)
        return 0.0 if s < 0.0 else (1.0 if s > 1.0 else s)

    def inverse_feature(self, col: int, v: float) -> float:
        lo, hi = self.mins[col], self.maxs[col]
        return lo if hi == lo else lo + v * (hi - lo)

    def inverse_target(self, v: float) -> float:
        return self.inverse_feature(self.target_col, v)


def normalize_minmax(windows: Tensor, targets: Tensor, fit_on,
                     target_col: int) -> tuple[Tensor, Tensor, NormParams]:
    """Min-max scale to [0, 1] with statistics from ``fit_on`` samples only.

    Feature stats come from the fit samples' window values; the target
    column additionally folds in the fit samples' target values (they are
    the same physical column a few rows later).  Values falling outside
    the fitted range (possible on the test side) saturate at 0 or 1.
    Constant features map to 0.
    """
    fit_on = list(fit_on)
    if not fit_on:
        raise DataError("normalization needs a non-empty fit split")
    n, window_len, n_feat = windows.shape
    mins = [math.inf] * n_feat
    maxs = [-math.inf] * n_feat
    wd = windows.data
    for i in fit_on:
        base = i * window_len * n_feat
        for r in range(window_len):
            off = base + r * n_feat
            for j in range(n_feat):
                v = wd[off + j]
                if v < mins[j]:
                    mins[j] = v
                if v > maxs[j]:
                    maxs[j] = v
    td = targets.data
    for i in fit_on:
        v = td[i]
        if v < mins[target_col]:
            mins[target_col] = v
        if v > maxs[target_col]:
            maxs[target_col] = v

    params = NormParams(tuple(mins), tuple(maxs), target_col)
    out_w = array("d", bytes(8 * len(wd)))
    pos = 0
    for i in range(n):
        for r in range(window_len):
            for j in range(n_feat):
                out_w[pos] = params.scale_feature(j, wd[pos])
                pos += 1
    out_t = array("d", (params.scale_feature(target_col, td[i]) for i in range(n)))
    return (Tensor(windows.shape, out_w), Tensor(targets.shape, out_t), params)


# ---------------------------------------------------------------------------
# per-node split

@dataclass
class NodeDataset:
    """One client's normalized, windowed series with all split bookkeeping.

    ``seen`` and ``unseen`` partition a shuffled view of the train split
    (seen is what federation trains on; unseen stays local-only), while
    ``local`` is an independently drawn representative subset that may
    overlap either.  Test indices are strictly the most recent samples.
    """

    node_id: int
    windows: Tensor
    targets: Tensor
    train_idx: tuple[int, ...]
    test_idx: tuple[int, ...]
    seen_idx: tuple[int, ...]
    unseen_idx: tuple[int, ...]
    local_idx: tuple[int, ...]
    norm: NormParams

    def subset(self, indices) -> tuple[Tensor, Tensor]:
        return take_rows(self.windows, list(indices)), take_rows(self.targets, list(indices))

    def train_data(self) -> tuple[Tensor, Tensor]:
        return self.subset(self.train_idx)

    def test_data(self) -> tuple[Tensor, Tensor]:
        return self.subset(self.test_idx)

    def seen_data(self) -> tuple[Tensor, Tensor]:
        return self.subset(self.seen_idx)

    @property
    def train_size(self) -> int:
        return len(self.train_idx)


def split_node_dataset(windows: Tensor, targets: Tensor, ratios, seed: int,
                       target_col: int, node_id: int = 0,
                       subset_fractions=(0.6, 0.2, 0.2)) -> NodeDataset:
    """Chronological train/test split, subset masks, and normalization.

    ``ratios`` is (train, test), both positive, summing to 1.  The test
    block is the most recent samples.  Normalization statistics are
    fitted on the train split only.
    """
    train_ratio, test_ratio = ratios
    if train_ratio <= 0 or test_ratio <= 0:
        raise DataError(f"split ratios must be positive, got {ratios}")
    if abs(train_ratio + test_ratio - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    n = windows.shape[0]
    n_train = int(round(n * train_ratio))
    n_test = n - n_train
    if n_train < 1 or n_test < 1:
        raise DataError(
            f"degenerate split: {n} samples with ratios {ratios} "
            f"gives train={n_train}, test={n_test}")

    train_idx = tuple(range(n_train))
    test_idx = tuple(range(n_train, n))

    f_seen, f_unseen, f_local = subset_fractions
    rng = random.Random(seed)
    shuffled = list(train_idx)
    rng.shuffle(shuffled)
    n_seen = min(int(round(f_seen * n_train)), n_train)
    n_unseen = min(int(round(f_unseen * n_train)), n_train - n_seen)
    seen_idx = tuple(sorted(shuffled[:n_seen]))
    unseen_idx = tuple(sorted(shuffled[n_seen:n_seen + n_unseen]))
    if f_local > 0:
        n_local = max(1, int(round(f_local * n_train)))
        local_idx = tuple(sorted(rng.sample(train_idx, n_local)))
    else:
        local_idx = ()

    norm_w, norm_t, norm = normalize_minmax(windows, targets, train_idx, target_col)
    return NodeDataset(node_id, norm_w, norm_t, train_idx, test_idx,
                       seen_idx, unseen_idx, local_idx, norm)


def build_node_datasets(schema: DatasetSchema, tables: list[RawTable],
                        window_len: int, ratios, seed: int,
                        subset_fractions=(0.6, 0.2, 0.2),
                        horizon: int = 1) -> list[NodeDataset]:
    """Window, split and normalize one table per node."""
    nodes = []
    for i, table in enumerate(tables):
        windows, targets = make_windows(table, window_len, schema.target_name,
                                        horizon)
        nodes.append(split_node_dataset(
            windows, targets, ratios, seed=seed + 9973 * i,
            target_col=schema.target_col, node_id=i,
            subset_fractions=subset_fractions))
    return nodes
