"""Semigroup-regularized diffeomorphic registration with time-embedded flow networks."""
from .errors import *  # noqa: F401,F403
from .grid import (DisplacementField, GridGeometry, LabelMap, LandmarkSet, ScalarImage, compose,
                   jacobian_det, warp_image, warp_labels)
from .loss import LossConfig, local_ncc, semigroup_loss, sim_loss, total_loss
from .model import (FieldModel, FieldModelConfig, TimeEmbeddingConfig, deformation_at, field_forward,
                    init_params)
from .train import TrainConfig, train

__version__ = "0.1.0"
