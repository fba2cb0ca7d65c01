from .composite import ANALYZERS, CompositeConfig, load_config, resolve_rules
from .layers import AvgPool2D, Conv2D, Dense, Flatten, MaxPool2D, ReLU
from .lrp import AttributionMap, attribute, pool_channels, propagate
from .metrics import BoundingBox, aggregate, baseline_report, localization_score
from .model import Model, forward, gradient_wrt_input, load_model, save_model
from .occlusion import delta_f, occlude, occlusion_experiment
from .render import Heatmap2D, colorize, write_image
from .rules import ZB, AlphaBeta, Epsilon, Flat, Identity, WinnerTakeAll, Z
from .training import TrainingConfig, train_model

__all__ = [
    "ANALYZERS",
    "CompositeConfig",
    "load_config",
    "resolve_rules",
    "AvgPool2D",
    "Conv2D",
    "Dense",
    "Flatten",
    "MaxPool2D",
    "ReLU",
    "AttributionMap",
    "attribute",
    "pool_channels",
    "propagate",
    "BoundingBox",
    "aggregate",
    "baseline_report",
    "localization_score",
    "Model",
    "forward",
    "gradient_wrt_input",
    "load_model",
    "save_model",
    "delta_f",
    "occlude",
    "occlusion_experiment",
    "Heatmap2D",
    "colorize",
    "write_image",
    "ZB",
    "AlphaBeta",
    "Epsilon",
    "Flat",
    "Identity",
    "WinnerTakeAll",
    "Z",
    "TrainingConfig",
    "train_model",
]
