"""Config-driven experiment pipeline: LC -> FL -> personalization -> report.

Reproduces the five-way comparison protocol: every node first trains a
model on its own data alone (LC), the nodes then federate into a global
model (FL), and the global model is personalized per node by knowledge
distillation, active learning, and local memorization (KD / AL / LM).
Every stage evaluates on the node's held-out most-recent test block and
persists its results, so stages can also be run (and re-run) one at a
time against previously written artifacts.

All randomness flows from the three config seeds (data / init / train),
which makes rerunning a config byte-identical down to the report files.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .data import (
    BUILTIN_SCHEMAS,
    DatasetSchema,
    NodeDataset,
    SyntheticConfig,
    build_node_datasets,
    generate_synthetic,
    load_csv,
)
from .federation import (
    FederationConfig,
    FederationSession,
    derive_seed,
    run_session,
)
from .metrics import MetricReport, mae, mse, render_csv, render_json, rmse, sanitize
from .models import ModelParams, ModelSpec, init_params, predict, train_epochs
from .params_io import load_params, save_params
from .personalization import ALConfig, KDConfig, LMConfig, PersonalizationConfig, personalize


class ConfigError(ValueError):
    """Unusable experiment configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed or its prerequisites are missing."""


STAGES = ("lc", "fl", "personalize", "report")


@dataclass
class ExperimentConfig:
    schema: DatasetSchema
    spec: ModelSpec
    federation: FederationConfig
    synthetic: SyntheticConfig
    csv_dir: str | None = None
    window_len: int = 16
    horizon: int = 1
    train_ratio: float = 0.8
    subset_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    lc_epochs: int = 20
    al: ALConfig = field(default_factory=ALConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    personalization_seed: int = 0
    data_seed: int = 1
    init_seed: int = 2
    train_seed: int = 3
    out_dir: str = "fedcast_run"
    jobs: int = 1
    emit_original_units: bool = False

    def config_hash(self) -> str:
        """Stable digest of everything that affects results (not where
        they are written or how many workers run)."""
        payload = asdict(self)
        payload.pop("out_dir")
        payload.pop("jobs")
        text = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    version: str
    stages_run: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    status: str = "ok"
    error: str | None = None


# ---------------------------------------------------------------------------
# config file parsing

_KNOWN_KEYS = {
    "dataset": {"name", "csv_dir", "target", "window_len", "horizon",
                "train_ratio", "records_per_node", "noise_std",
                "node_shift_scale", "seasonality", "subset_fractions"},
    "model": {"family", "hidden_dims", "d_model", "num_heads", "num_layers"},
    "federation": {"rounds", "local_epochs", "lr", "batch_size"},
    "lc": {"epochs"},
    "personalization": {"seed"},
    "personalization.al": {"strategy", "pool_size", "queries_per_step",
                           "steps", "epochs_per_step", "lr", "batch_size"},
    "personalization.kd": {"mixture", "distill_epochs", "lr", "batch_size"},
    "personalization.lm": {"alpha", "beta", "gamma", "finetune_epochs", "lr",
                           "batch_size", "local_policy", "local_fraction"},
    "seeds": {"data", "init", "train"},
    "output": {"dir", "original_units"},
}


class _Section:
    def __init__(self, parser, name):
        self._has = parser.has_section(name)
        self._items = dict(parser.items(name)) if self._has else {}
        self._name = name

    def _convert(self, key, cast, default):
        if key not in self._items:
            return default
        raw = self._items[key].strip()
        try:
            return cast(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{self._name}] {key} = {raw!r}: {exc}")

    def str(self, key, default=None):
        return self._convert(key, str, default)

    def int(self, key, default=None):
        return self._convert(key, int, default)

    def float(self, key, default=None):
        return self._convert(key, float, default)

    def bool(self, key, default=False):
        return self._convert(
            key, lambda s: {"true": True, "1": True, "yes": True,
                            "false": False, "0": False, "no": False}[s.lower()],
            default)

    def floats(self, key, default=()):
        return self._convert(
            key, lambda s: tuple(float(p) for p in s.split(",") if p.strip()),
            tuple(default))

    def ints(self, key, default=()):
        return self._convert(
            key, lambda s: tuple(int(p) for p in s.split(",") if p.strip()),
            tuple(default))


def load_config(path) -> ExperimentConfig:
    """Parse an INI experiment file into a validated ExperimentConfig."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not parser.read([path]):
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(dict(parser.items(section))) - _KNOWN_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")

    ds = _Section(parser, "dataset")
    name = ds.str("name")
    csv_dir = ds.str("csv_dir")
    if name is None and csv_dir is None:
        raise ConfigError("[dataset] needs a builtin name or a csv_dir")
    if name is not None:
        if name not in BUILTIN_SCHEMAS:
            raise ConfigError(
                f"unknown dataset {name!r}; builtin schemas: "
                f"{sorted(BUILTIN_SCHEMAS)}")
        schema = BUILTIN_SCHEMAS[name]
    else:
        schema = _infer_schema(csv_dir, ds.str("target"))
    target = ds.str("target")
    if target is not None:
        if target not in schema.feature_names:
            raise ConfigError(
                f"target {target!r} not among {schema.name} features")
        schema = schema.with_target(target)

    try:
        synthetic = SyntheticConfig(
            seed=0,  # overwritten by [seeds] data below
            records_per_node=ds.int("records_per_node", 400),
            seasonality_periods=ds.floats("seasonality", (24.0, 168.0)),
            noise_std=ds.float("noise_std", 0.05),
            node_shift_scale=ds.float("node_shift_scale", 0.0))
    except ValueError as exc:
        raise ConfigError(str(exc))

    model = _Section(parser, "model")
    family = model.str("family")
    if family is None:
        raise ConfigError("[model] family is required")
    window_len = ds.int("window_len", 16)
    try:
        spec = ModelSpec(
            family=family,
            input_dim=len(schema.feature_names),
            window_len=window_len,
            output_dim=1,
            hidden_dims=model.ints("hidden_dims", (32, 16)),
            d_model=model.int("d_model", 8),
            num_heads=model.int("num_heads", 2),
            num_layers=model.int("num_layers", 2))
    except ValueError as exc:
        raise ConfigError(str(exc))

    fed = _Section(parser, "federation")
    seeds = _Section(parser, "seeds")
    try:
        federation = FederationConfig(
            rounds=fed.int("rounds", 10),
            local_epochs=fed.int("local_epochs", 2),
            lr=fed.float("lr", 0.05),
            batch_size=fed.int("batch_size", 32),
            seed=seeds.int("train", 3))
    except ValueError as exc:
        raise ConfigError(str(exc))

    pers = _Section(parser, "personalization")
    al_s = _Section(parser, "personalization.al")
    kd_s = _Section(parser, "personalization.kd")
    lm_s = _Section(parser, "personalization.lm")
    try:
        al = ALConfig(strategy=al_s.str("strategy", "error_based"),
                      pool_size=al_s.int("pool_size", 64),
                      queries_per_step=al_s.int("queries_per_step", 8),
                      steps=al_s.int("steps", 4),
                      epochs_per_step=al_s.int("epochs_per_step", 1),
                      lr=al_s.float("lr", 0.05),
                      batch_size=al_s.int("batch_size", 16))
        kd = KDConfig(mixture=kd_s.float("mixture", 0.5),
                      distill_epochs=kd_s.int("distill_epochs", 5),
                      lr=kd_s.float("lr", 0.05),
                      batch_size=kd_s.int("batch_size", 32))
        lm = LMConfig(alpha=lm_s.float("alpha", 0.4),
                      beta=lm_s.float("beta", 0.3),
                      gamma=lm_s.float("gamma", 0.3),
                      finetune_epochs=lm_s.int("finetune_epochs", 3),
                      lr=lm_s.float("lr", 0.05),
                      batch_size=lm_s.int("batch_size", 32),
                      local_fraction=lm_s.float("local_fraction", None),
                      local_policy=lm_s.str("local_policy", "uniform"))
    except ValueError as exc:
        raise ConfigError(str(exc))

    lc = _Section(parser, "lc")
    out = _Section(parser, "output")
    subset_fractions = ds.floats("subset_fractions", (0.6, 0.2, 0.2))
    if len(subset_fractions) != 3:
        raise ConfigError("subset_fractions needs three values (seen, unseen, local)")

    return ExperimentConfig(
        schema=schema,
        spec=spec,
        federation=federation,
        synthetic=replace(synthetic, seed=seeds.int("data", 1)),
        csv_dir=csv_dir,
        window_len=window_len,
        horizon=ds.int("horizon", 1),
        train_ratio=ds.float("train_ratio", 0.8),
        subset_fractions=subset_fractions,
        lc_epochs=lc.int("epochs", federation.rounds * federation.local_epochs),
        al=al, kd=kd, lm=lm,
        personalization_seed=pers.int("seed", 0),
        data_seed=seeds.int("data", 1),
        init_seed=seeds.int("init", 2),
        train_seed=seeds.int("train", 3),
        out_dir=out.str("dir", "fedcast_run"),
        emit_original_units=out.bool("original_units", False))


def _infer_schema(csv_dir: str, target: str | None) -> DatasetSchema:
    if target is None:
        raise ConfigError("[dataset] csv_dir without a builtin name needs a target")
    files = sorted(Path(csv_dir).glob("*.csv"))
    if not files:
        raise ConfigError(f"no .csv files in {csv_dir}")
    with files[0].open(encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().strip().split(",")]
    if not header or header == [""]:
        raise ConfigError(f"{files[0]}: empty header")
    try:
        return DatasetSchema(name=f"custom:{Path(csv_dir).name}",
                             feature_names=tuple(header), target_name=target,
                             node_count=len(files))
    except ValueError as exc:
        raise ConfigError(str(exc))


# ---------------------------------------------------------------------------
# pipeline stages

def build_nodes(cfg: ExperimentConfig) -> list[NodeDataset]:
    """Materialize every node's windowed, split, normalized dataset."""
    if cfg.csv_dir is not None:
        files = sorted(Path(cfg.csv_dir).glob("*.csv"))
        if not files:
            raise ConfigError(f"no .csv files in {cfg.csv_dir}")
        tables = [load_csv(f, cfg.schema) for f in files]
    else:
        tables = generate_synthetic(cfg.schema, cfg.synthetic)
    return build_node_datasets(cfg.schema, tables, cfg.window_len,
                               (cfg.train_ratio, 1.0 - cfg.train_ratio),
                               seed=cfg.data_seed,
                               subset_fractions=cfg.subset_fractions,
                               horizon=cfg.horizon)


def _evaluate(params: ModelParams, node: NodeDataset) -> dict:
    """Test-set metrics in normalized units plus original units."""
    x, y = node.test_data()
    pred = predict(params, x)
    truth = list(y.data)
    est = list(pred.data)
    entry = {"norm": {}, "flags": {}, "orig": {}, "orig_flags": {}}
    for metric, fn in (("mse", mse), ("mae", mae), ("rmse", rmse)):
        v, flagged = sanitize(fn(truth, est))
        entry["norm"][metric] = v
        entry["flags"][metric] = flagged
    inv = node.norm.inverse_target
    truth_o = [inv(v) for v in truth]
    est_o = [inv(v) for v in est]
    for metric, fn in (("mse", mse), ("mae", mae), ("rmse", rmse)):
        v, flagged = sanitize(fn(truth_o, est_o))
        entry["orig"][metric] = v
        entry["orig_flags"][metric] = flagged
    return entry


def _stage_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "stages"


def _params_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "params"


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _stage_lc(cfg: ExperimentConfig, nodes: list[NodeDataset]) -> list[str]:
    """Local-only baseline: per node, train from the shared init on that
    node's seen subset and evaluate on its own test block."""
    results = {}
    for node in nodes:
        params = init_params(cfg.spec, cfg.init_seed)
        train_epochs(params, node.seen_data(), epochs=cfg.lc_epochs,
                     lr=cfg.federation.lr, batch_size=cfg.federation.batch_size,
                     seed=derive_seed(cfg.train_seed, 0, node.node_id))
        results[str(node.node_id)] = _evaluate(params, node)
    path = _stage_dir(cfg) / "lc.json"
    _write_json(path, {"method": "LC", "nodes": results})
    return [str(path)]


def _stage_fl(cfg: ExperimentConfig,
              nodes: list[NodeDataset]) -> tuple[list[str], ModelParams]:
    session = FederationSession.create(cfg.spec, nodes, cfg.federation,
                                       init_seed=cfg.init_seed,
                                       snapshot_dir=_params_dir(cfg))
    reports, final = run_session(session, jobs=cfg.jobs)
    final_path = _params_dir(cfg) / "final.params"
    save_params(final, final_path)
    results = {str(node.node_id): _evaluate(final, node) for node in nodes}
    path = _stage_dir(cfg) / "fl.json"
    _write_json(path, {
        "method": "FL",
        "nodes": results,
        "final_snapshot": str(final_path),
        "rounds": [{"round": r.round_index, "agg_seconds": r.agg_seconds,
                    "client_losses": {str(k): v for k, v in r.client_losses.items()}}
                   for r in reports],
    })
    artifacts = [str(path), str(final_path)]
    artifacts.extend(r.snapshot for r in reports if r.snapshot)
    return artifacts, final


def _personalization_config(cfg: ExperimentConfig, method: str,
                            node_id: int) -> PersonalizationConfig:
    seed = cfg.personalization_seed + 31 * node_id
    if method == "al":
        return PersonalizationConfig(method="al", al=cfg.al, seed=seed)
    if method == "kd":
        return PersonalizationConfig(method="kd", kd=cfg.kd, seed=seed)
    return PersonalizationConfig(method="lm", lm=cfg.lm, seed=seed)


def _stage_personalize(cfg: ExperimentConfig, nodes: list[NodeDataset],
                       global_params: ModelParams | None) -> list[str]:
    if global_params is None:
        final_path = _params_dir(cfg) / "final.params"
        if not final_path.exists():
            raise StageError(
                "personalization needs a federated snapshot; run the fl stage first")
        global_params = load_params(cfg.spec, final_path)

    def one_node(node: NodeDataset) -> tuple[int, dict, list[str]]:
        per_method = {}
        written = []
        for method in ("kd", "al", "lm"):
            mcfg = _personalization_config(cfg, method, node.node_id)
            tuned = personalize(global_params, node, mcfg)
            snap = _params_dir(cfg) / f"node_{node.node_id}_{method}.params"
            snap.parent.mkdir(parents=True, exist_ok=True)
            save_params(tuned, snap)
            written.append(str(snap))
            per_method[method.upper()] = _evaluate(tuned, node)
        return node.node_id, per_method, written

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(one_node, nodes))
    else:
        outcomes = [one_node(node) for node in nodes]

    methods: dict[str, dict[str, dict]] = {"KD": {}, "AL": {}, "LM": {}}
    artifacts = []
    for node_id, per_method, written in outcomes:
        for m, entry in per_method.items():
            methods[m][str(node_id)] = entry
        artifacts.extend(written)
    path = _stage_dir(cfg) / "personalize.json"
    _write_json(path, {"methods": methods})
    return [str(path)] + artifacts


def emit_report(report: MetricReport, out_dir) -> list[Path]:
    """Write report.csv and report.json; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    json_path = out_dir / "report.json"
    csv_path.write_text(render_csv(report), encoding="utf-8")
    json_path.write_text(render_json(report), encoding="utf-8")
    return [csv_path, json_path]


def _load_stage(cfg: ExperimentConfig, name: str) -> dict:
    path = _stage_dir(cfg) / f"{name}.json"
    if not path.exists():
        raise StageError(f"report needs the {name} stage (missing {path})")
    return json.loads(path.read_text(encoding="utf-8"))


def _stage_report(cfg: ExperimentConfig) -> list[str]:
    lc = _load_stage(cfg, "lc")
    fl = _load_stage(cfg, "fl")
    pers = _load_stage(cfg, "personalize")
    node_ids = tuple(sorted(int(k) for k in lc["nodes"]))

    def build(kind: str) -> MetricReport:
        report = MetricReport(node_ids)
        flag_key = "flags" if kind == "norm" else "orig_flags"
        for method, payload in (("LC", lc["nodes"]), ("FL", fl["nodes"])):
            for key, entry in payload.items():
                report.add_values(int(key), method, entry[kind], entry[flag_key])
        for method in ("KD", "AL", "LM"):
            for key, entry in pers["methods"][method].items():
                report.add_values(int(key), method, entry[kind], entry[flag_key])
        return report

    paths = emit_report(build("norm"), cfg.out_dir)
    if cfg.emit_original_units:
        orig = build("orig")
        out_dir = Path(cfg.out_dir)
        p_csv = out_dir / "report_original.csv"
        p_json = out_dir / "report_original.json"
        p_csv.write_text(render_csv(orig), encoding="utf-8")
        p_json.write_text(render_json(orig), encoding="utf-8")
        paths.extend([p_csv, p_json])
    return [str(p) for p in paths]


# ---------------------------------------------------------------------------
# runner

def run_experiment(cfg: ExperimentConfig, only: str | None = None) -> RunManifest:
    """Run the pipeline (or one stage) and write manifest.json.

    Stage failures are recorded in the manifest, partial outputs are
    kept, and a StageError is raised for the caller to turn into a
    nonzero exit status.
    """
    if only is not None and only not in STAGES:
        raise ConfigError(f"--only must be one of {STAGES}, got {only!r}")
    stages = [only] if only else list(STAGES)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash=cfg.config_hash(), version=__version__)

    nodes: list[NodeDataset] | None = None
    global_params: ModelParams | None = None

    def need_nodes() -> list[NodeDataset]:
        nonlocal nodes
        if nodes is None:
            nodes = build_nodes(cfg)
        return nodes

    try:
        for stage in stages:
            t0 = time.perf_counter()
            if stage == "lc":
                manifest.artifacts.extend(_stage_lc(cfg, need_nodes()))
            elif stage == "fl":
                artifacts, global_params = _stage_fl(cfg, need_nodes())
                manifest.artifacts.extend(artifacts)
            elif stage == "personalize":
                manifest.artifacts.extend(
                    _stage_personalize(cfg, need_nodes(), global_params))
            else:
                manifest.artifacts.extend(_stage_report(cfg))
            manifest.timings[stage] = time.perf_counter() - t0
            manifest.stages_run.append(stage)
    except Exception as exc:
        manifest.status = "failed"
        manifest.error = f"{stage}: {exc}"
        _write_json(out_dir / "manifest.json", asdict(manifest))
        if isinstance(exc, StageError):
            raise
        raise StageError(manifest.error) from exc

    _write_json(out_dir / "manifest.json", asdict(manifest))
    return manifest
