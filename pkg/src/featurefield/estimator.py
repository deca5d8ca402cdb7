"""Scikit-learn style facade over scene fitting and open-vocabulary queries.

``FeatureFieldEstimator.fit`` takes a scene directory (or loaded SceneData),
optimizes the implicit field, and exposes the fitted scene through the usual
estimator surface: ``transform`` maps 3D points to feature vectors,
``predict`` maps them to prompt classes, ``score`` computes mIoU against
reference labels. Rendering helpers cover the 2D query path.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .encoding import EncodingConfig
from .evaluation import ConfusionMatrix, miou_macc
from .field import FieldConfig, FieldModel, load_checkpoint
from .renderer import render_maps
from .scene_io import IGNORE_INDEX, SceneData, load_embeddings, load_scene
from .segmentation import (DictionaryEncoder, EmbeddingSet, classify_features,
                           encode_labels, segment_points, segment_view)
from .trainer import LossWeights, TrainConfig, train_offline


def validate_points(points) -> np.ndarray:
    """Nx3 finite float array or a clear error."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected points of shape (n, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite values")
    return pts


class FeatureFieldEstimator(BaseEstimator):
    """Fits a density/color/feature field to a posed RGB-D scene.

    Parameters mirror the training and encoding knobs; all have desk-scale
    friendly defaults except where the established defaults matter
    (loss weights, encoding growth).
    """

    def __init__(self, iterations=3000, batch_size=1024, samples_per_ray=32,
                 learning_rate=5e-3, lambda_depth=0.1, lambda_feature=0.5,
                 hash_levels=16, table_size_log2=19, base_resolution=16,
                 per_level_scale=1.3819, features_per_level=2, freq_bands=2,
                 sh_degree=4, geo_dim=15, hidden_width=64, precision="float32",
                 feature_lookup="nearest", opacity_threshold=0.5, cosine=False,
                 snapshot_interval=500, seed=0):
        self.iterations = iterations
        self.batch_size = batch_size
        self.samples_per_ray = samples_per_ray
        self.learning_rate = learning_rate
        self.lambda_depth = lambda_depth
        self.lambda_feature = lambda_feature
        self.hash_levels = hash_levels
        self.table_size_log2 = table_size_log2
        self.base_resolution = base_resolution
        self.per_level_scale = per_level_scale
        self.features_per_level = features_per_level
        self.freq_bands = freq_bands
        self.sh_degree = sh_degree
        self.geo_dim = geo_dim
        self.hidden_width = hidden_width
        self.precision = precision
        self.feature_lookup = feature_lookup
        self.opacity_threshold = opacity_threshold
        self.cosine = cosine
        self.snapshot_interval = snapshot_interval
        self.seed = seed

    # ------------------------------------------------------------------
    # configuration plumbing
    # ------------------------------------------------------------------

    def _encoding_config(self) -> EncodingConfig:
        return EncodingConfig(freq_bands=self.freq_bands,
                              hash_levels=self.hash_levels,
                              base_resolution=self.base_resolution,
                              per_level_scale=self.per_level_scale,
                              table_size_log2=self.table_size_log2,
                              features_per_level=self.features_per_level,
                              sh_degree=self.sh_degree)

    def _field_config(self, feature_dim: int) -> FieldConfig:
        w = self.hidden_width
        return FieldConfig(feature_dim=feature_dim, geo_dim=self.geo_dim,
                           density_hidden=(w,), color_hidden=(w, w),
                           feature_hidden=(w, w))

    def _train_config(self, frame_ids) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                           samples_per_ray=self.samples_per_ray,
                           learning_rate=self.learning_rate, seed=self.seed,
                           snapshot_interval=self.snapshot_interval,
                           precision=self.precision,
                           feature_lookup=self.feature_lookup,
                           frame_ids=tuple(frame_ids) if frame_ids is not None else None)

    # ------------------------------------------------------------------
    # estimator surface
    # ------------------------------------------------------------------

    def fit(self, X, y=None, frame_ids=None, out_dir=None):
        """Optimize the field on a scene directory path or SceneData.

        y is unused (present for estimator API compatibility).
        """
        scene = X if isinstance(X, SceneData) else load_scene(X)
        if scene.feature_dim is None:
            raise ValueError("scene has no feature maps; nothing to distill")
        snapshot, records = train_offline(
            scene, out_dir=out_dir,
            encoding=self._encoding_config(),
            field_config=self._field_config(scene.feature_dim),
            train_config=self._train_config(frame_ids),
            loss_weights=LossWeights(self.lambda_depth, self.lambda_feature))
        self.snapshot_ = snapshot
        self.model_ = FieldModel.from_snapshot(snapshot)
        self.records_ = records
        self.embeddings_ = None
        if not isinstance(X, SceneData):
            emb_path = Path(X) / "embeddings.txt"
            if emb_path.exists():
                known = load_embeddings(emb_path)
                self.encoder_ = DictionaryEncoder(known)
                self.embeddings_ = known
        return self

    @classmethod
    def from_checkpoint(cls, path, embeddings=None) -> "FeatureFieldEstimator":
        """A fitted estimator around a saved checkpoint (no training)."""
        snap = load_checkpoint(path)
        est = cls()
        est.snapshot_ = snap
        est.model_ = FieldModel.from_snapshot(snap)
        est.records_ = []
        est.embeddings_ = None
        if embeddings is not None:
            known = load_embeddings(embeddings)
            est.encoder_ = DictionaryEncoder(known)
            est.embeddings_ = known
        return est

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this FeatureFieldEstimator is not fitted yet")

    def _require_embeddings(self) -> EmbeddingSet:
        self._require_fitted()
        if self.embeddings_ is None:
            raise ValueError("no prompts set; call set_prompts() or fit on a "
                             "scene with an embeddings file")
        return self.embeddings_

    def set_prompts(self, prompts, encoder=None) -> "FeatureFieldEstimator":
        """Choose the label set used by predict/segment; order = class index."""
        self._require_fitted()
        if encoder is None:
            if not hasattr(self, "encoder_"):
                raise ValueError("no encoder available; pass one explicitly")
            encoder = self.encoder_
        self.embeddings_ = encode_labels(list(prompts), encoder)
        return self

    @property
    def labels_(self) -> list:
        return list(self._require_embeddings().labels)

    def transform(self, X) -> np.ndarray:
        """3D world points -> distilled feature vectors (n, D)."""
        self._require_fitted()
        return self.model_.features_at(validate_points(X))

    def predict(self, X) -> np.ndarray:
        """3D world points -> class indices under the current prompts."""
        emb = self._require_embeddings()
        idx, _, _ = segment_points(self.model_, validate_points(X), emb,
                                   cosine=self.cosine)
        return idx

    def predict_scores(self, X):
        emb = self._require_embeddings()
        feats = self.transform(X)
        return classify_features(feats, emb, cosine=self.cosine)

    def score(self, X, y) -> float:
        """mIoU of predicted point classes against reference labels."""
        emb = self._require_embeddings()
        pred = self.predict(X)
        cm = ConfusionMatrix(emb.num_classes, ignore_index=IGNORE_INDEX)
        cm.accumulate(pred, np.asarray(y))
        return miou_macc(cm).miou

    # ------------------------------------------------------------------
    # 2D query path
    # ------------------------------------------------------------------

    def render(self, pose, intrinsics, which=("color", "depth", "opacity"),
               n_samples=128, resolution=None):
        self._require_fitted()
        return render_maps(self.model_, np.asarray(pose, dtype=np.float64),
                           intrinsics, which=which, n_samples=n_samples,
                           resolution=resolution)

    def segment(self, pose, intrinsics, n_samples=64, resolution=None,
                keep_class_scores=False):
        emb = self._require_embeddings()
        return segment_view(self.model_, np.asarray(pose, dtype=np.float64),
                            intrinsics, emb, n_samples=n_samples,
                            resolution=resolution,
                            opacity_threshold=self.opacity_threshold,
                            cosine=self.cosine,
                            keep_class_scores=keep_class_scores)
