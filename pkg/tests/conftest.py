import pytest

from pointpretrain.datagen import GeneratorConfig, generate_dataset, write_dataset
from pointpretrain.losses import LossWeights
from pointpretrain.model import ModelConfig
from pointpretrain.patching import PatchConfig
from pointpretrain.training import TrainConfig

TINY_GEN = GeneratorConfig(views_per_scene=2, depth_height=32, depth_width=32,
                           teacher_dim=8)


def tiny_train_config(**overrides) -> TrainConfig:
    defaults = dict(
        steps=4,
        batch_size=2,
        learning_rate=1e-3,
        seed=0,
        n_points=128,
        holdout_scenes=2,
        patch=PatchConfig(n=8, k_nn=4),
        model=ModelConfig(embed_dim=16, encoder_depth=1, decoder_depth=1,
                          num_heads=2, mlp_ratio=2.0, teacher_dim=8,
                          n_patches=8, k_nn=4),
        loss_weights=LossWeights(),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_samples():
    return generate_dataset(TINY_GEN, 10, base_seed=0)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_samples):
    root = tmp_path_factory.mktemp("tiny_ds") / "data"
    write_dataset(tiny_samples, root)
    return root
