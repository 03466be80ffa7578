"""Treatment-conditioned survival regression on multi-channel 3D volumes."""

from .conditioning import TREATMENTS, TreatmentCode, adain, map_treatment, specialize
from .data import (
    FoldSplit,
    SyntheticConfig,
    VolumeSample,
    generate_synthetic,
    normalize,
    read_dataset,
    stratified_kfold,
    write_dataset,
)
from .estimator import TreatmentSurvivalRegressor
from .model import SurvivalNet, SurvivalNetConfig, build, forward, param_manifest
from .training import (
    RunReport,
    TrainConfig,
    evaluate,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train_fold,
)

__version__ = "0.1.0"

__all__ = [
    "TREATMENTS",
    "FoldSplit",
    "RunReport",
    "SurvivalNet",
    "SurvivalNetConfig",
    "SyntheticConfig",
    "TrainConfig",
    "TreatmentCode",
    "TreatmentSurvivalRegressor",
    "VolumeSample",
    "adain",
    "build",
    "evaluate",
    "forward",
    "generate_synthetic",
    "load_checkpoint",
    "map_treatment",
    "normalize",
    "param_manifest",
    "read_dataset",
    "run_ablation",
    "save_checkpoint",
    "specialize",
    "stratified_kfold",
    "train_fold",
    "write_dataset",
]
