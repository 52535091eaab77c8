"""Tensor convolutional neural networks.

Convolution kernels stored and trained as truncated Tucker factorizations,
plus the surrounding pipeline: dense tensor algebra, from-scratch layers and
backprop, a synthetic defect-image dataset, Adam training with weighted
sampling and augmentation, quality/compression metrics, and a CLI.
"""

from .data import (
    AugmentConfig,
    Sample,
    SplitDataset,
    augment,
    generate_synthetic,
    preprocess,
    sampler_weights,
    samples_from_records,
    split,
)
from .metrics import (
    ConfusionMatrix,
    EvalReport,
    auc,
    confusion,
    evaluate_scores,
    quality,
)
from .model import (
    Model,
    ModelSpec,
    ParamReport,
    RankConfig,
    build_model,
    count_params,
    load_checkpoint,
    predict_scores,
    reference_spec,
    save_checkpoint,
    tensorize_pretrained,
)
from .tensor import (
    SvdResult,
    TuckerFactors,
    contract,
    fold,
    svd,
    tucker_decompose,
    tucker_reconstruct,
    unfold,
)
from .training import (
    TrainConfig,
    TrainRecord,
    adam_step,
    lr_at,
    time_improvement,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "Sample", "SplitDataset", "augment", "generate_synthetic",
    "preprocess", "sampler_weights", "samples_from_records", "split",
    "ConfusionMatrix", "EvalReport", "auc", "confusion", "evaluate_scores",
    "quality", "Model", "ModelSpec", "ParamReport", "RankConfig", "build_model",
    "count_params", "load_checkpoint", "predict_scores", "reference_spec",
    "save_checkpoint", "tensorize_pretrained", "SvdResult", "TuckerFactors",
    "contract", "fold", "svd", "tucker_decompose", "tucker_reconstruct",
    "unfold", "TrainConfig", "TrainRecord", "adam_step", "lr_at",
    "time_improvement", "train",
]
