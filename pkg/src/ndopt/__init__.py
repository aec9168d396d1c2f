"""Optimizing non-decomposable classification metrics for linear softmax classifiers."""

from .metrics import (
    ClassPrior,
    ConfusionMatrix,
    LagrangeState,
    MetricGradient,
    MetricKind,
    MetricSpec,
    confusion_from_predictions,
    metric_grad_unconstrained,
    metric_value,
    reparam_confusion,
)
from .linear_model import FeatureMatrix, LinearClassifier, TrainConfig
from .selmix import finetune, mixup_gain_matrix, selmix_distribution, simulate_policies
from .csst import SelfTrainConfig, csst_train
from .data_io import DatasetBundle, SyntheticSpec, gen_longtail_gaussians

__version__ = "0.1.0"
