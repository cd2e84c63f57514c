"""Knowledge distillation from a CNN teacher into small vision transformers."""

from kdlab._core import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    Model,
    ParameterError,
    ParseError,
    average_precision,
    compare_features,
    cosine_similarity,
    euclidean_distance,
    evaluate,
    kd_loss,
    load_dataset,
    load_model,
    lr_at,
    make_model,
    mean_ap,
    preset_names,
    run_cli,
    softmax_t,
    task_loss,
    top1_accuracy,
    total_loss,
)

__all__ = [name for name in dir() if not name.startswith("_")]
