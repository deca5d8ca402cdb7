"""Open-vocabulary neural feature fields over posed RGB-D scenes.

Learns density, color, and vision-language feature vectors jointly through
volumetric rendering, then answers text-prompt segmentation queries in 2D
(rendered maps) and 3D (point lookups) at run time.
"""

from .encoding import EncodingConfig
from .estimator import FeatureFieldEstimator
from .field import FieldConfig, FieldModel, load_checkpoint, save_checkpoint
from .scene_io import (CameraIntrinsics, LabeledPointCloud, PosedFrame,
                       SceneBounds, SceneData, load_scene)
from .segmentation import (DictionaryEncoder, EmbeddingSet, classify_features,
                           encode_labels, segment_points, segment_view)
from .synthetic import SceneSpec, default_scene_spec, generate_scene, oracle_render
from .trainer import LossWeights, OnlineTrainer, TrainConfig, Trainer, train_offline

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "DictionaryEncoder", "EmbeddingSet", "EncodingConfig",
    "FeatureFieldEstimator", "FieldConfig", "FieldModel", "LabeledPointCloud",
    "LossWeights", "OnlineTrainer", "PosedFrame", "SceneBounds", "SceneData",
    "SceneSpec", "TrainConfig", "Trainer", "classify_features",
    "default_scene_spec", "encode_labels", "generate_scene", "load_checkpoint",
    "load_scene", "oracle_render", "save_checkpoint", "segment_points",
    "segment_view", "train_offline",
]
