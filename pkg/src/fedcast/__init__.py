"""fedcast: federated time-series forecasting with per-node personalization.

Simulates a coordinator and N edge clients: local baselines, federated
averaging over configurable rounds, and three post-federation
personalization methods (active learning, knowledge distillation, local
memorization), evaluated per node as a five-way LC/FL/KD/AL/LM
comparison.  Model math runs on a built-in float64 tensor engine with
reverse-mode autodiff whose hot kernels are a compiled extension with a
pure-Python fallback (see :mod:`fedcast.backend`).
"""

__version__ = "0.1.0"

from .backend import BACKEND
from .tensor import (
    ComputationTape,
    MissingGradError,
    NumericError,
    OptimizerState,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    sgd_step,
    tensor,
)
from .models import (
    LstmState,
    ModelParams,
    ModelSpec,
    TrainStats,
    init_params,
    loss_value,
    predict,
    train_epochs,
)
from .data import (
    BUILTIN_SCHEMAS,
    DataError,
    DatasetSchema,
    NodeDataset,
    SyntheticConfig,
    build_node_datasets,
    generate_synthetic,
    load_csv,
    make_windows,
)
from .federation import (
    ClientHandle,
    FederationConfig,
    FederationSession,
    RoundReport,
    federated_average,
    run_round,
    run_session,
)
from .personalization import (
    ALConfig,
    EmptySubsetError,
    KDConfig,
    LMConfig,
    PersonalizationConfig,
    QueryResult,
    al_personalize,
    al_score,
    kd_losses,
    kd_personalize,
    lm_personalize,
    personalize,
    select_local_subset,
)
from .metrics import MetricReport, mae, mse, rmse, sanitize
from .experiment import (
    ConfigError,
    ExperimentConfig,
    RunManifest,
    StageError,
    load_config,
    run_experiment,
)

__all__ = [
    "BACKEND",
    "__version__",
    # tensor core
    "Tensor", "tensor", "ComputationTape", "backward", "OptimizerState",
    "sgd_step", "ShapeError", "NumericError", "TapeError", "MissingGradError",
    # models
    "ModelSpec", "ModelParams", "LstmState", "TrainStats", "init_params",
    "loss_value", "predict", "train_epochs",
    # data
    "DatasetSchema", "BUILTIN_SCHEMAS", "SyntheticConfig", "NodeDataset",
    "DataError", "generate_synthetic", "load_csv", "make_windows",
    "build_node_datasets",
    # federation
    "FederationConfig", "FederationSession", "ClientHandle", "RoundReport",
    "federated_average", "run_round", "run_session",
    # personalization
    "PersonalizationConfig", "ALConfig", "KDConfig", "LMConfig",
    "QueryResult", "EmptySubsetError", "personalize", "al_score",
    "al_personalize", "kd_losses", "kd_personalize", "lm_personalize",
    "select_local_subset",
    # metrics & experiments
    "MetricReport", "mae", "mse", "rmse", "sanitize",
    "ExperimentConfig", "RunManifest", "ConfigError", "StageError",
    "load_config", "run_experiment",
]
