import numpy as np
import pytest
import torch

from egobody.dataset import (
    FrameRecord, RigConfig, default_asset, make_procedural_texture, render_frame, sample_pose_sequence,
)

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def asset():
    return default_asset()


def make_frames(asset, n, res=64, texture_size=64, seed=100, styles=("walk", "box", "dance", "jump")):
    cams = RigConfig().cameras(res)
    frames = []
    for i in range(n):
        p = sample_pose_sequence(seed + i, 1, styles[i % len(styles)])[0]
        tex = make_procedural_texture(seed + i, size=texture_size, uv_regions=asset.uv_regions)
        imgs, meta = render_frame(asset, p, tex, cams)
        frames.append(FrameRecord(
            imgs["ego_front"], imgs["ego_back"], imgs["tp_front"], imgs["tp_back"], tex, p,
            np.asarray(meta["joints3d"]), np.asarray(meta["joints2d_tp_front"]),
            np.asarray(meta["visibility_tp_front"], dtype=bool), i, i, meta,
        ))
    return frames


@pytest.fixture(scope="session")
def frames16(asset):
    return make_frames(asset, 16)


@pytest.fixture(scope="session")
def frame64(frames16):
    return frames16[0]


def build_tiny_models(asset, view=64, texture_size=64, base=8):
    from egobody.inference import InferenceModels
    from egobody.recovery import RecoveryTrainConfig, build_regressor
    from egobody.texture import texture_generator_config
    from egobody.translation import GeneratorConfig, build_generator

    torch.manual_seed(0)
    G = build_generator(GeneratorConfig(in_shape=(2 * view, view), base_channels=base, depth=3))
    R = build_regressor(RecoveryTrainConfig(image_size=view, base_channels=base))
    T = build_generator(texture_generator_config(view, texture_size, base_channels=base, depth=3))
    return InferenceModels(G, R, T, asset)


@pytest.fixture(scope="session")
def tiny_models(asset):
    return build_tiny_models(asset)
