import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from refanimate.autoencoder import AutoencoderConfig, AutoencoderTrainConfig
from refanimate.checkpoint import Models
from refanimate.datagen import gen_dataset
from refanimate.nets import UNetConfig
from refanimate.training import ClipTensors, init_stage1_models, train_stage0

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow,
                                                 HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# 32x32 images keep the full pipeline fast; f=8 gives 4x4 latents
TINY_AE = AutoencoderConfig(channels_lat=4, widths=(8, 8, 8), n_tok=4, d_emb=16,
                            semantic_res=16, semantic_widths=(8, 8, 16))
TINY_UNET = UNetConfig(latent_channels=4, base_channels=8, channel_mults=(1, 2), heads=2,
                       context_dim=16, t_emb_dim=16, norm_groups=4)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    recs = gen_dataset(root, 2, 6, seed=3, resolution=32)
    return recs, ClipTensors.from_records(recs)


@pytest.fixture(scope="session")
def tiny_stage0(tiny_data):
    _, data = tiny_data
    bundle, _ = train_stage0(data, AutoencoderTrainConfig(steps=20, batch_size=4), TINY_AE)
    return bundle


@pytest.fixture
def tiny_models(tiny_stage0) -> Models:
    return init_stage1_models(tiny_stage0, TINY_UNET, pose_channels=(4, 4, 8, 8), seed=0)


# desk-scale run shared by the training-criterion tests: 20 clips x 10 frames
# = 200 frames at 64x64
@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    recs = gen_dataset(root, 20, 10, seed=11, resolution=64)
    return recs, ClipTensors.from_records(recs)


@pytest.fixture(scope="session")
def desk_stage0(desk_data):
    _, data = desk_data
    return train_stage0(data, AutoencoderTrainConfig(steps=2000, batch_size=8, seed=0))


@pytest.fixture(scope="session")
def desk_stage1(desk_data, desk_stage0):
    from refanimate.training import TrainConfig, train_stage1
    _, data = desk_data
    return train_stage1(data, desk_stage0[0], TrainConfig(stage=1, steps=2000, seed=0))


@pytest.fixture(scope="session")
def desk_stage2(desk_data, desk_stage1):
    from refanimate.training import TrainConfig, train_stage2
    _, data = desk_data
    return train_stage2(data, desk_stage1[0],
                        TrainConfig(stage=2, steps=1000, clip_length=8, lr=3e-4, seed=0))
