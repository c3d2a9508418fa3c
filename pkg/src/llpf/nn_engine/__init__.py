"""Minimal numpy training engine: graphs, init, autodiff, SGD, datasets."""

from .engine import NormState, forward, init_params, loss_and_grad
from .graph import GraphError, GraphNode, ModelGraph, build_model, lenet_micro, mlp2, resnet_micro
from .trainer import (
    AugmentSpec,
    Dataset,
    StopRule,
    TrainerConfig,
    TrainResult,
    evaluate,
    fit_norm_buffers,
    fixed_subset,
    sample_batch,
    sgd_step,
    train_until,
)

__all__ = [
    "AugmentSpec",
    "Dataset",
    "GraphError",
    "GraphNode",
    "ModelGraph",
    "NormState",
    "StopRule",
    "TrainerConfig",
    "TrainResult",
    "build_model",
    "evaluate",
    "fit_norm_buffers",
    "fixed_subset",
    "forward",
    "init_params",
    "lenet_micro",
    "loss_and_grad",
    "mlp2",
    "resnet_micro",
    "sample_batch",
    "sgd_step",
    "train_until",
]
