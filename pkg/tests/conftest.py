import numpy as np
import pytest

from featurefield import encoding, field, synthetic
from featurefield.scene_io import load_scene


@pytest.fixture(scope="session")
def tiny_spec():
    return synthetic.default_scene_spec(
        seed=7, image_size=(48, 36), cloud_points=1500,
        feature_dim=4,
        orbit=synthetic.OrbitConfig(target=(2.0, 2.0, 0.55), radius=1.5,
                                    heights=(1.1, 1.7, 2.2), count=8))


@pytest.fixture(scope="session")
def tiny_scene_dir(tiny_spec, tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    synthetic.generate_scene(tiny_spec, out)
    return out


@pytest.fixture(scope="session")
def tiny_scene(tiny_scene_dir):
    return load_scene(tiny_scene_dir)


@pytest.fixture()
def small_model(tiny_scene):
    enc = encoding.EncodingConfig(hash_levels=4, table_size_log2=10,
                                  base_resolution=4, per_level_scale=1.6)
    cfg = field.FieldConfig(feature_dim=4, density_hidden=(16,),
                            color_hidden=(16,), feature_hidden=(16,))
    return field.FieldModel(enc, cfg, tiny_scene.bounds,
                            rng=np.random.default_rng(0))


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_scene, tmp_path_factory):
    """A briefly trained checkpoint on the tiny scene (quality irrelevant)."""
    from featurefield.trainer import TrainConfig, train_offline

    out = tmp_path_factory.mktemp("ckpt")
    enc = encoding.EncodingConfig(hash_levels=4, table_size_log2=12,
                                  base_resolution=8, per_level_scale=1.5)
    cfg = field.FieldConfig(feature_dim=4, density_hidden=(32,),
                            color_hidden=(32,), feature_hidden=(32,))
    config = TrainConfig(iterations=60, batch_size=128, samples_per_ray=12,
                         seed=1, snapshot_interval=30, learning_rate=1e-2)
    train_offline(tiny_scene, out_dir=out, encoding=enc, field_config=cfg,
                  train_config=config)
    return out / "checkpoint.ffld"
