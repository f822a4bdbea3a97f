"""Inverse cooking on a numpy autodiff engine: images to ingredient sets to recipes."""

from . import tensor
from .nn import FusionStrategy, ModelConfig, desk_config, full_scale_config
from .ingredients import ModelKind, build_ingredient_model
from .instructions import RecipeModel, Variant
from .synthetic import SyntheticSpec
from .training import TrainConfig, desk_train_config, full_scale_train_config

__all__ = ["tensor", "FusionStrategy", "ModelConfig", "desk_config", "full_scale_config", "ModelKind",
           "build_ingredient_model", "RecipeModel", "Variant", "SyntheticSpec", "TrainConfig",
           "desk_train_config", "full_scale_train_config"]
