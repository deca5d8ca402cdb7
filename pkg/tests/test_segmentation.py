"""Zero-shot classification tests: argmax rules, invariances, view/point paths."""

import numpy as np
import pytest

from featurefield import numerics as nm
from featurefield.scene_io import CameraIntrinsics
from featurefield.segmentation import (DictionaryEncoder, EmbeddingSet,
                                       SegmentationError, classify_features,
                                       encode_labels, segment_points, segment_view,
                                       similarity_scores)
from featurefield.synthetic import look_at_pose


def ortho_embeddings(k=3, d=8, seed=0):
    basis, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return EmbeddingSet(labels=[f"c{i}" for i in range(k)],
                        vectors=basis.T[:k].astype(np.float32))


class TestEmbeddingSet:
    def test_duplicate_labels_rejected(self):
        with pytest.raises(SegmentationError, match="duplicate"):
            EmbeddingSet(labels=["a", "a"], vectors=np.zeros((2, 3)))

    def test_empty_rejected(self):
        with pytest.raises(SegmentationError):
            EmbeddingSet(labels=[], vectors=np.zeros((0, 3)))

    def test_background_index_is_class_count(self):
        emb = ortho_embeddings(3)
        assert emb.background_index == 3


class TestEncodeLabels:
    def test_dictionary_encoder_round_trip(self):
        known = ortho_embeddings(3)
        enc = DictionaryEncoder(known)
        emb = encode_labels(["c1", "c0"], enc)
        assert emb.labels == ["c1", "c0"]
        np.testing.assert_array_equal(emb.vectors[0], known.vectors[1])

    def test_unknown_prompt_lists_known_labels(self):
        enc = DictionaryEncoder(ortho_embeddings(2))
        with pytest.raises(SegmentationError, match="c0.*c1"):
            encode_labels(["zebra"], enc)

    def test_empty_prompt_list(self):
        enc = DictionaryEncoder(ortho_embeddings(2))
        with pytest.raises(SegmentationError, match="empty"):
            encode_labels([], enc)

    def test_repeated_prompt(self):
        enc = DictionaryEncoder(ortho_embeddings(2))
        with pytest.raises(SegmentationError, match="repeated"):
            encode_labels(["c0", "c0"], enc)


class TestClassifyFeatures:
    def test_exact_embedding_maps_to_its_class(self):
        emb = ortho_embeddings(4)
        idx, score = classify_features(emb.vectors[2][None, :], emb)
        assert idx[0] == 2
        assert score[0] == pytest.approx(1.0, abs=1e-6)

    def test_tie_breaks_toward_lowest_index(self):
        emb = EmbeddingSet(labels=["a", "b"],
                           vectors=np.array([[1.0, 0.0], [0.0, 1.0]], np.float32))
        idx, _ = classify_features(np.array([[0.5, 0.5]]), emb)
        assert idx[0] == 0

    def test_positive_scaling_invariance_1000_random(self):
        rng = np.random.default_rng(5)
        emb = ortho_embeddings(5, d=6)
        feats = rng.normal(size=(1000, 6)).astype(np.float32)
        base, _ = classify_features(feats, emb)
        scaled, _ = classify_features(feats * 3.7, emb)
        np.testing.assert_array_equal(base, scaled)

    def test_row_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        emb = ortho_embeddings(4, d=8)
        feats = rng.normal(size=(200, 8)).astype(np.float32)
        perm = [2, 0, 3, 1]
        base, _ = classify_features(feats, emb)
        permuted, _ = classify_features(feats, emb.permuted(perm))
        # class i in the permuted set is class perm[i] in the original
        np.testing.assert_array_equal(np.array(perm)[permuted], base)

    def test_dim_mismatch(self):
        emb = ortho_embeddings(2, d=4)
        with pytest.raises(SegmentationError, match="dim"):
            classify_features(np.zeros((1, 5)), emb)

    def test_cosine_mode_normalizes(self):
        emb = EmbeddingSet(labels=["a", "b"],
                           vectors=np.array([[2.0, 0.0], [0.0, 1.0]], np.float32))
        # raw dot favors the long row; cosine is scale-free
        raw, _ = classify_features(np.array([[0.4, 0.5]]), emb)
        cos, _ = classify_features(np.array([[0.4, 0.5]]), emb, cosine=True)
        assert raw[0] == 0
        assert cos[0] == 1

    def test_scores_shape(self):
        emb = ortho_embeddings(3, d=4)
        s = similarity_scores(np.zeros((7, 4)), emb)
        assert s.shape == (7, 3)


class TestSegmentPoints:
    def test_same_point_twice_identical(self, small_model):
        emb = ortho_embeddings(3, d=4)
        pts = np.array([[2.0, 2.0, 1.0], [2.0, 2.0, 1.0]])
        idx, score, clamped = segment_points(small_model, pts, emb)
        assert idx[0] == idx[1]
        assert score[0] == score[1]
        assert not clamped.any()

    def test_out_of_bounds_clamped_and_flagged(self, small_model):
        emb = ortho_embeddings(3, d=4)
        inside = np.array([[3.999, 2.0, 1.0]])
        outside = np.array([[99.0, 2.0, 1.0]])
        idx_in, _, flag_in = segment_points(small_model, inside, emb)
        idx_out, _, flag_out = segment_points(small_model, outside, emb)
        assert not flag_in[0] and flag_out[0]

    def test_view_independence_by_construction(self, small_model):
        # features_at consumes positions only; no direction argument exists
        emb = ortho_embeddings(3, d=4)
        pts = np.random.default_rng(0).uniform(0.5, 3.0, (16, 3))
        a, _, _ = segment_points(small_model, pts, emb)
        b, _, _ = segment_points(small_model, pts, emb)
        np.testing.assert_array_equal(a, b)

    def test_dim_mismatch(self, small_model):
        emb = ortho_embeddings(3, d=9)
        with pytest.raises(SegmentationError):
            segment_points(small_model, np.zeros((1, 3)), emb)

    def test_bad_points_shape(self, small_model):
        emb = ortho_embeddings(3, d=4)
        with pytest.raises(SegmentationError, match="Nx3"):
            segment_points(small_model, np.zeros((3, 2)), emb)


class FakeFeatureModel:
    """Piecewise-constant feature field with huge density (opacity ~ 1)."""

    feature_dim = 4

    def __init__(self, bounds, emb):
        self.bounds = bounds
        self.emb = emb

    def world_to_unit(self, pts):
        offset, scale = self.bounds.normalizer()
        return (np.asarray(pts) - offset) * scale

    def encode_positions(self, pts):
        return nm.Tensor(np.asarray(pts, dtype=np.float32))

    def encode_directions(self, dirs):
        return np.asarray(dirs, dtype=np.float32)

    def query_density(self, x):
        n = x.shape[0]
        return (nm.Tensor(np.full((n, 1), 1000.0, dtype=np.float32)),
                nm.Tensor(x.data))

    def query_color(self, geo, d_enc):
        return nm.Tensor(np.zeros((geo.shape[0], 3), dtype=np.float32))

    def query_feature(self, geo):
        # left half of the box is class 0, right half the last class
        cls = (geo.data[:, 0] > 0.5).astype(int) * (len(self.emb.labels) - 1)
        return nm.Tensor(self.emb.vectors[cls])


class TestSegmentView:
    def test_opaque_piecewise_field_reproduces_classify(self):
        from featurefield.renderer import (generate_rays, image_pixel_grid,
                                           sample_positions)
        from featurefield.scene_io import SceneBounds
        from featurefield.segmentation import classify_features
        emb = ortho_embeddings(2, d=4)
        bounds = SceneBounds(np.zeros(3), np.array([4.0, 4.0, 3.0]))
        model = FakeFeatureModel(bounds, emb)
        intr = CameraIntrinsics(30.0, 30.0, 12.0, 9.0, 24, 18)
        pose = look_at_pose((2.0, 0.5, 1.5), (2.0, 3.5, 1.5))
        seg = segment_view(model, pose, intr, emb, n_samples=24)
        assert seg.classes.shape == (18, 24)
        assert np.all(seg.opacity > 0.99)
        # with opacity ~1 every ray terminates at its first sample, so the
        # map must equal classify_features of the field value there
        rays = generate_rays(pose, intr, image_pixel_grid(24, 18), bounds)
        t0 = (rays.t_near + (rays.t_far - rays.t_near) / 48)[:, None]
        entry = sample_positions(rays, t0)[:, 0, :]
        unit = model.world_to_unit(entry)
        field_vals = model.query_feature(model.encode_positions(unit)).data
        expected, _ = classify_features(field_vals, emb)
        np.testing.assert_array_equal(seg.classes.reshape(-1), expected)
        # pixels looking at the left half classify 0, right half 1
        assert seg.classes[9, 2] != seg.classes[9, 21]

    def test_low_opacity_marked_background(self, small_model):
        small_model.params["density.b1"].data[0] = -40.0  # empty field
        emb = ortho_embeddings(3, d=4)
        intr = CameraIntrinsics(20.0, 20.0, 8.0, 6.0, 16, 12)
        pose = look_at_pose((2.0, 1.0, 1.5), (2.0, 3.0, 1.0))
        seg = segment_view(small_model, pose, intr, emb, n_samples=8)
        assert np.all(seg.classes == emb.background_index)

    def test_single_class_everything_that_hits_is_class_zero(self):
        from featurefield.scene_io import SceneBounds
        emb = ortho_embeddings(1, d=4)
        bounds = SceneBounds(np.zeros(3), np.array([4.0, 4.0, 3.0]))
        model = FakeFeatureModel(bounds, emb)
        intr = CameraIntrinsics(20.0, 20.0, 8.0, 6.0, 16, 12)
        pose = look_at_pose((2.0, 0.5, 1.5), (2.0, 3.5, 1.5))
        seg = segment_view(model, pose, intr, emb, n_samples=16)
        assert set(np.unique(seg.classes)) == {0}

    def test_keep_class_scores(self, small_model):
        emb = ortho_embeddings(3, d=4)
        intr = CameraIntrinsics(20.0, 20.0, 8.0, 6.0, 16, 12)
        pose = look_at_pose((2.0, 1.0, 1.5), (2.0, 3.0, 1.0))
        seg = segment_view(small_model, pose, intr, emb, n_samples=8,
                           keep_class_scores=True)
        assert seg.class_scores.shape == (3, 12, 16)
