"""Explanation-penalized training on a self-contained numpy autodiff engine.

The package trains small dense and convolutional classifiers with a loss
that adds a penalty on layer-wise decomposition importance scores (or on
masked input gradients, for the comparison method) to cross-entropy, so
models can be steered away from planted spurious cues.
"""

__version__ = "0.1.0"

from . import autodiff
from .autodiff import Tensor, backward, backward_as_graph, no_grad
from .cd import CDState, FeatureGroup, cd_forward, cd_frozen_prefix
from .config import ConfigError, ExperimentConfig, preset
from .data import LabeledDataset
from .layers import (Network, build_compas_mlp, build_mnist_cnn,
                     build_mnist_mlp, forward, init_params)
from .metrics import EvalReport, evaluate
from .objective import (ExplanationTarget, LossReport, cdep_loss,
                        cross_entropy, explanation_error,
                        make_boost_target, make_suppress_targets,
                        sample_pixel_targets)
from .rrr import AnnotationMask, rrr_loss
from .train import TrainError, sweep, train

__all__ = [
    "Tensor", "backward", "backward_as_graph", "no_grad",
    "CDState", "FeatureGroup", "cd_forward", "cd_frozen_prefix",
    "ConfigError", "ExperimentConfig", "preset",
    "LabeledDataset",
    "Network", "build_compas_mlp", "build_mnist_cnn", "build_mnist_mlp",
    "forward", "init_params",
    "EvalReport", "evaluate",
    "ExplanationTarget", "LossReport", "cdep_loss", "cross_entropy",
    "explanation_error", "make_boost_target", "make_suppress_targets",
    "sample_pixel_targets",
    "AnnotationMask", "rrr_loss",
    "TrainError", "sweep", "train",
    "autodiff", "__version__",
]
