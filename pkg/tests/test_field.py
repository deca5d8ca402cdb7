"""Field model tests: the three query heads, snapshots, checkpoints."""

import numpy as np
import pytest

from featurefield import numerics as nm
from featurefield.encoding import EncodingConfig
from featurefield.field import (FieldConfig, FieldModel, load_checkpoint,
                                save_checkpoint)
from featurefield.scene_io import SceneBounds


def make_model(feature_dim=4, dtype=np.float32, seed=0, **field_kwargs):
    enc = EncodingConfig(hash_levels=3, table_size_log2=8, base_resolution=4,
                         per_level_scale=1.7)
    cfg = FieldConfig(feature_dim=feature_dim, density_hidden=(16,),
                      color_hidden=(16,), feature_hidden=(16,), **field_kwargs)
    bounds = SceneBounds(np.zeros(3), np.array([2.0, 2.0, 2.0]))
    return FieldModel(enc, cfg, bounds, rng=np.random.default_rng(seed), dtype=dtype)


class TestDensityHead:
    def test_fresh_model_positive_finite_sigma(self):
        model = make_model()
        x = model.encode_positions(np.array([[0.5, 0.5, 0.5]]))
        sigma, geo = model.query_density(x)
        assert sigma.data[0, 0] > 0.0
        assert np.all(np.isfinite(sigma.data))
        assert geo.shape == (1, 15)

    def test_batch_of_1000_all_nonnegative(self):
        model = make_model()
        pts = np.random.default_rng(1).random((1000, 3))
        sigma, _ = model.query_density(model.encode_positions(pts))
        assert sigma.shape == (1000, 1)
        assert np.all(sigma.data >= 0.0)

    def test_dimension_mismatch(self):
        model = make_model()
        with pytest.raises(nm.ShapeError, match="query_density"):
            model.query_density(nm.Tensor(np.zeros((1, 7))))


class TestColorHead:
    def test_bounded_output(self):
        model = make_model()
        rng = np.random.default_rng(2)
        geo = nm.Tensor(rng.normal(0, 10.0, (64, 15)).astype(np.float32))
        dirs = rng.normal(size=(64, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        color = model.query_color(geo, model.encode_directions(dirs))
        assert np.all(color.data >= 0.0) and np.all(color.data <= 1.0)

    def test_view_dependence_not_constrained(self):
        model = make_model(seed=5)
        geo = nm.Tensor(np.random.default_rng(3).normal(size=(1, 15)).astype(np.float32))
        c1 = model.query_color(geo, model.encode_directions(np.array([[0.0, 0.0, 1.0]])))
        c2 = model.query_color(geo, model.encode_directions(np.array([[1.0, 0.0, 0.0]])))
        assert not np.allclose(c1.data, c2.data)

    def test_dimension_mismatch(self):
        model = make_model()
        with pytest.raises(nm.ShapeError, match="direction"):
            model.query_color(nm.Tensor(np.zeros((1, 15))), np.zeros((1, 3)))


class TestFeatureHead:
    @pytest.mark.parametrize("d", [2, 8, 512])
    def test_output_length(self, d):
        model = make_model(feature_dim=d)
        geo = nm.Tensor(np.zeros((3, 15), dtype=np.float32))
        assert model.query_feature(geo).shape == (3, d)

    def test_feature_ignores_direction_by_construction(self):
        model = make_model()
        geo = nm.Tensor(np.random.default_rng(0).normal(size=(4, 15)).astype(np.float32))
        f1 = model.query_feature(geo).data
        f2 = model.query_feature(geo).data
        np.testing.assert_array_equal(f1, f2)

    def test_unnormalized_outputs(self):
        # identity output layer: values are not squashed into any range
        model = make_model(seed=11)
        geo = nm.Tensor((np.random.default_rng(4).normal(size=(128, 15)) * 20)
                        .astype(np.float32))
        out = model.query_feature(geo).data
        assert out.max() > 1.0 or out.min() < -1.0


class TestViewIndependence:
    def test_direction_changes_only_color(self):
        model = make_model()
        pts = np.random.default_rng(5).random((16, 3))
        enc = model.encode_positions(pts)
        sigma1, geo1 = model.query_density(enc)
        feat1 = model.query_feature(geo1)
        enc2 = model.encode_positions(pts)
        sigma2, geo2 = model.query_density(enc2)
        feat2 = model.query_feature(geo2)
        np.testing.assert_array_equal(sigma1.data, sigma2.data)
        np.testing.assert_array_equal(feat1.data, feat2.data)
        d1 = model.encode_directions(np.tile([0.0, 0.0, 1.0], (16, 1)))
        d2 = model.encode_directions(np.tile([0.0, 1.0, 0.0], (16, 1)))
        c1 = model.query_color(geo1, d1).data
        c2 = model.query_color(geo2, d2).data
        assert not np.allclose(c1, c2)


class TestParameterCount:
    def test_count_matches_analytic_formula(self):
        model = make_model(feature_dim=4)
        enc, cfg = model.encoding, model.config
        grids = enc.hash_levels * enc.table_size * enc.features_per_level
        def mlp(inp, hidden, out):
            dims = [inp, *hidden, out]
            return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        expected = (grids
                    + mlp(enc.position_dim, cfg.density_hidden, 1 + cfg.geo_dim)
                    + mlp(cfg.geo_dim + enc.direction_dim, cfg.color_hidden, 3)
                    + mlp(cfg.geo_dim, cfg.feature_hidden, cfg.feature_dim))
        assert model.parameter_count() == expected

    def test_all_finite_outputs_for_random_inputs(self):
        model = make_model()
        rng = np.random.default_rng(8)
        pts = rng.random((256, 3))
        dirs = rng.normal(size=(256, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        sigma, geo = model.query_density(model.encode_positions(pts))
        color = model.query_color(geo, model.encode_directions(dirs))
        feat = model.query_feature(geo)
        for t in (sigma, geo, color, feat):
            assert np.all(np.isfinite(t.data))


class TestSnapshotsAndCheckpoints:
    def test_snapshot_is_immutable_copy(self):
        model = make_model()
        snap = model.snapshot(3)
        assert snap.version == 3
        with pytest.raises(ValueError):
            snap.params["density.w0"][0, 0] = 1.0
        model.params["density.w0"].data[0, 0] += 5.0
        assert snap.params["density.w0"][0, 0] != model.params["density.w0"].data[0, 0]

    def test_from_snapshot_reproduces_queries(self):
        model = make_model()
        snap = model.snapshot(1)
        clone = FieldModel.from_snapshot(snap)
        pts = np.random.default_rng(2).random((32, 3))
        a, ga = model.query_density(model.encode_positions(pts))
        b, gb = clone.query_density(clone.encode_positions(pts))
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(ga.data, gb.data)

    def test_checkpoint_round_trip_bit_identical(self, tmp_path):
        model = make_model(feature_dim=6)
        snap = model.snapshot(7)
        path = tmp_path / "model.ffld"
        save_checkpoint(path, snap)
        back = load_checkpoint(path)
        assert back.version == 7
        assert back.encoding == model.encoding
        assert back.config == model.config
        np.testing.assert_array_equal(back.bounds.minimum, snap.bounds.minimum)
        assert set(back.params) == set(snap.params)
        for name in snap.params:
            a = snap.params[name].astype(np.float32)
            np.testing.assert_array_equal(a, back.params[name])

    def test_checkpoint_write_read_write_bytes_identical(self, tmp_path):
        model = make_model()
        save_checkpoint(tmp_path / "a.ffld", model.snapshot(1))
        save_checkpoint(tmp_path / "b.ffld", load_checkpoint(tmp_path / "a.ffld"))
        assert (tmp_path / "a.ffld").read_bytes() == (tmp_path / "b.ffld").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "junk.ffld").write_bytes(b"JUNKxxxx")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "junk.ffld")
