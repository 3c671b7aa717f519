"""MidResBlock brain-tumor classifiers on a small numpy autodiff core."""
from .model import (NetworkConfig, MidResBlockConfig, Model, build_baseline_lenet, build_midres_classifier,
                    build_model, forward_logits, init_parameters, midresblock_forward, full_scale_config,
                    predict_class)
from .tensor import Parameter, Tensor, backward, no_grad
from .training import TrainConfig, evaluate_accuracy, fit, kfold_run, report_table

__version__ = "0.1.0"

__all__ = [
    "MidResBlockConfig", "Model", "NetworkConfig", "Parameter", "Tensor", "TrainConfig", "backward",
    "build_baseline_lenet", "build_midres_classifier", "build_model", "evaluate_accuracy", "fit",
    "forward_logits", "init_parameters", "kfold_run", "midresblock_forward", "no_grad", "full_scale_config",
    "predict_class", "report_table",
]
