"""Time-series cluster kernel for multivariate series with informative missingness."""

from .dataset import (
    DatasetError,
    MtsDataset,
    MtsRecord,
    concat_missingness_indicators,
    from_arrays,
    impute,
    ingest_long_format,
    load_dataset,
    missing_rates,
    read_long_events,
    save_dataset,
    standardize,
)
from .evaluation import (
    EvalReport,
    KFoldProtocol,
    UndersampleHoldout,
    evaluate_pipeline,
    export_embedding,
    knn_classify,
    kpca_fit,
    kpca_project,
    metrics,
)
from .kernel import (
    EnsembleConfig,
    GramMatrix,
    TrainedKernel,
    kernel_test,
    linear_kernel,
    load_gram,
    load_model,
    save_gram,
    save_model,
    train_tck_im,
)
from .mixture import MixtureFit, MixtureHyperparams, MixtureParams, StoppingRule, fit_map_em
from .synth import InfeasibleTargetError, inject, make_gaussian_toy, target_length, transform_lengths

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
