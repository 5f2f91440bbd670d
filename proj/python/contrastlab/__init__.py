"""Contrastive representation transfer lab."""

from ._core import (
    CheckpointMeta,
    ConfigError,
    ContractError,
    Dataset,
    DimensionError,
    DomainSpec,
    EncoderConfig,
    EpisodeSpec,
    FeatureSet,
    FewShotResult,
    IoError,
    LoadError,
    LoadedCheckpoint,
    ModelConfig,
    ModelState,
    NumericalError,
    Objective,
    ProbeConfig,
    ProbeResult,
    Rng,
    Split,
    Tensor,
    calibration,
    class_separation,
    domain_preset,
    extract_features,
    fewshot_eval,
    generate_domain,
    linear_cka,
    linear_probe,
    load_checkpoint,
    objective_name,
    parse_objective,
    run,
)

__all__ = [
    "CheckpointMeta",
    "ConfigError",
    "ContractError",
    "Dataset",
    "DimensionError",
    "DomainSpec",
    "EncoderConfig",
    "EpisodeSpec",
    "FeatureSet",
    "FewShotResult",
    "IoError",
    "LoadError",
    "LoadedCheckpoint",
    "ModelConfig",
    "ModelState",
    "NumericalError",
    "Objective",
    "ProbeConfig",
    "ProbeResult",
    "Rng",
    "Split",
    "Tensor",
    "calibration",
    "class_separation",
    "domain_preset",
    "extract_features",
    "fewshot_eval",
    "generate_domain",
    "linear_cka",
    "linear_probe",
    "load_checkpoint",
    "objective_name",
    "parse_objective",
    "run",
]
