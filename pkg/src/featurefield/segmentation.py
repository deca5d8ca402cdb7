"""Zero-shot classification of features against text-prompt embeddings.

A rendered feature map or a 3D point's feature vector is assigned to the
prompt whose embedding has the highest dot product with it. Prompts are
embedded by a pluggable text encoder; a file-backed dictionary encoder ships
by default so everything runs without any pretrained model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .field import FieldModel
from .renderer import render_maps


class SegmentationError(ValueError):
    """Raised for invalid prompt sets or mismatched feature dimensions."""


@dataclass(frozen=True)
class EmbeddingSet:
    """Ordered label prompts with their embedding rows; row order = class index."""

    labels: list
    vectors: np.ndarray  # K x D

    def __post_init__(self):
        object.__setattr__(self, "vectors",
                           np.asarray(self.vectors, dtype=np.float32))
        if len(self.labels) < 1:
            raise SegmentationError("embedding set needs at least one label")
        if len(set(self.labels)) != len(self.labels):
            dupes = sorted({l for l in self.labels if self.labels.count(l) > 1})
            raise SegmentationError(f"duplicate labels: {dupes}")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.labels):
            raise SegmentationError(
                f"vectors shape {self.vectors.shape} does not match {len(self.labels)} labels")

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def background_index(self) -> int:
        """Index used for pixels that hit nothing; one past the last class."""
        return self.num_classes

    def permuted(self, order) -> "EmbeddingSet":
        order = list(order)
        return EmbeddingSet([self.labels[i] for i in order], self.vectors[order])


@runtime_checkable
class TextEncoder(Protocol):
    """Anything that can embed label strings into the feature space."""

    @property
    def dim(self) -> int: ...

    def encode(self, labels: list) -> np.ndarray: ...


class DictionaryEncoder:
    """File-backed encoder: knows exactly the labels of an embeddings file."""

    def __init__(self, known: EmbeddingSet):
        self._table = {label: known.vectors[i] for i, label in enumerate(known.labels)}
        self._dim = known.dim

    @classmethod
    def from_file(cls, path) -> "DictionaryEncoder":
        from .scene_io import load_embeddings
        return cls(load_embeddings(path))

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def known_labels(self) -> list:
        return sorted(self._table)

    def encode(self, labels: list) -> np.ndarray:
        rows = []
        for label in labels:
            if label not in self._table:
                raise SegmentationError(
                    f"unknown label '{label}'; known labels: {self.known_labels}")
            rows.append(self._table[label])
        return np.stack(rows)


def encode_labels(prompts: list, encoder: TextEncoder) -> EmbeddingSet:
    """Embed prompts in order; prompt order defines the class indices."""
    if not prompts:
        raise SegmentationError("prompt list is empty")
    if len(set(prompts)) != len(prompts):
        raise SegmentationError("repeated prompt in label list")
    return EmbeddingSet(labels=list(prompts), vectors=encoder.encode(list(prompts)))


def similarity_scores(features: np.ndarray, emb: EmbeddingSet,
                      cosine: bool = False) -> np.ndarray:
    """Per-class similarity (M, K): dot product, or cosine when requested."""
    feats = np.asarray(features)
    if feats.shape[-1] != emb.dim:
        raise SegmentationError(
            f"feature dim {feats.shape[-1]} != embedding dim {emb.dim}")
    vectors = emb.vectors
    if cosine:
        feats = feats / np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), 1e-12)
        vectors = vectors / np.maximum(np.linalg.norm(vectors, axis=-1, keepdims=True), 1e-12)
    return feats @ vectors.T


def classify_features(features: np.ndarray, emb: EmbeddingSet,
                      cosine: bool = False):
    """Argmax class per row; ties break toward the lowest class index.

    Returns (indices (M,), best score (M,)).
    """
    scores = similarity_scores(features, emb, cosine=cosine)
    idx = np.argmax(scores, axis=-1)
    best = np.take_along_axis(scores, idx[..., None], axis=-1)[..., 0]
    return idx.astype(np.int32), best


@dataclass
class SegmentationMap:
    """Per-pixel class indices with scores; background = num_classes."""

    classes: np.ndarray            # H x W int32, in [0, K] (K = background)
    scores: np.ndarray             # H x W float32, winning similarity
    opacity: np.ndarray            # H x W float32
    labels: list
    class_scores: np.ndarray | None = None  # K x H x W, on request

    @property
    def background_index(self) -> int:
        return len(self.labels)


def segment_view(model: FieldModel, pose: np.ndarray, intrinsics, emb: EmbeddingSet,
                 n_samples: int = 64, resolution: tuple | None = None,
                 opacity_threshold: float = 0.5, cosine: bool = False,
                 keep_class_scores: bool = False) -> SegmentationMap:
    """Render the feature map from a viewpoint and classify every pixel.

    Pixels whose rays terminate outside the scene volume (opacity below the
    threshold) are marked background rather than forced into a class.
    """
    if emb.dim != model.feature_dim:
        raise SegmentationError(
            f"embedding dim {emb.dim} != field feature dim {model.feature_dim}")
    maps = render_maps(model, pose, intrinsics, which=("feature",),
                       n_samples=n_samples, resolution=resolution)
    h, w, _ = maps["feature"].shape
    flat = maps["feature"].reshape(-1, model.feature_dim)
    scores = similarity_scores(flat, emb, cosine=cosine)
    idx = np.argmax(scores, axis=-1).astype(np.int32)
    best = np.take_along_axis(scores, idx[:, None], axis=-1)[:, 0]
    low = maps["opacity"].reshape(-1) < opacity_threshold
    idx[low] = emb.background_index
    return SegmentationMap(
        classes=idx.reshape(h, w),
        scores=best.astype(np.float32).reshape(h, w),
        opacity=maps["opacity"].astype(np.float32),
        labels=list(emb.labels),
        class_scores=scores.T.reshape(emb.num_classes, h, w).astype(np.float32)
        if keep_class_scores else None)


def segment_points(model: FieldModel, points: np.ndarray, emb: EmbeddingSet,
                   cosine: bool = False, chunk: int = 65536):
    """Classify 3D world points straight from the feature head (no rendering).

    Out-of-bounds points are clamped into the scene box and flagged.
    Returns (indices (N,), scores (N,), clamped (N,) bool).
    """
    if emb.dim != model.feature_dim:
        raise SegmentationError(
            f"embedding dim {emb.dim} != field feature dim {model.feature_dim}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise SegmentationError(f"points must be Nx3, got {pts.shape}")
    clamped_flags = ~model.bounds.contains(pts)
    indices = np.empty(len(pts), dtype=np.int32)
    scores = np.empty(len(pts), dtype=np.float32)
    for start in range(0, len(pts), chunk):
        feats = model.features_at(pts[start:start + chunk])
        idx, best = classify_features(feats, emb, cosine=cosine)
        indices[start:start + chunk] = idx
        scores[start:start + chunk] = best
    return indices, scores, clamped_flags
