import csv

import numpy as np
import pytest
import torch

from egobody.body_model import forward
from egobody.camera_rig import camera_world_pose
from egobody.dataset import RigConfig, region_mask
from egobody.renderer import check_texture, rasterize, render_depth
from egobody.texture import (
    TexturePair, TextureTrainer, fit_texture, generate_texture, load_texture_checkpoint,
    texture_generator_config, train_texture_step,
)
from egobody.translation import (
    METRIC_COLUMNS, CheckpointError, DiscriminatorConfig, GANTrainer, GeneratorConfig, TrainConfig,
    images_to_tensor, save_checkpoint,
)

# settings of the memorisation oracle (higher learning rate, lighter dropout)
ORACLE_GEN = dict(depth=4, base_channels=32, dropout_rate=0.25)
ORACLE_TRAIN = TrainConfig(lr_g=2e-3, lr_d=2e-3)


def small_trainer(lam=100.0, view=64, T=64):
    return TextureTrainer(texture_generator_config(view, T, depth=3, base_channels=8),
                          DiscriminatorConfig(base_channels=8, n_layers=2), TrainConfig(lambda_l1=lam))


def test_pair_from_frame(frame64):
    pair = TexturePair.from_frame(frame64)
    assert pair.input.shape == (128, 64, 3)
    assert pair.target.shape == (64, 64, 3)
    with pytest.raises(ValueError):
        TexturePair(pair.input, pair.target[:, :32])


def test_output_square_power_of_two(frame64):
    for T in (32, 64):
        tr = small_trainer(T=T)
        tex = generate_texture(tr.G, TexturePair.from_frame(frame64).input)
        assert tex.shape == (T, T, 3) and tex.dtype == np.uint8
        check_texture(tex)
    with pytest.raises(ValueError):
        texture_generator_config(64, 48)
    with pytest.raises(ValueError):
        generate_texture(small_trainer().G, np.zeros((64, 64, 3), np.uint8))


def test_non_square_output_refused():
    with pytest.raises(ValueError):
        TextureTrainer(GeneratorConfig(in_shape=(128, 64), out_shape=(32, 64), depth=3),
                       DiscriminatorConfig(), TrainConfig())


def test_lambda_zero_is_pure_adversarial(frame64):
    tr = small_trainer(lam=0.0)
    pair = TexturePair.from_frame(frame64)
    x, y = images_to_tensor(pair.input), images_to_tensor(pair.target)
    tr.G.eval()
    total, adv, l1 = tr.generator_objective(x, y)
    assert total.item() == adv.item() and l1.item() > 0


def test_metrics_columns_match_translation(frame64, tmp_path):
    tr = small_trainer()
    pair = TexturePair.from_frame(frame64)
    m = train_texture_step(tr, [pair])
    assert tuple(m) == METRIC_COLUMNS
    fit_texture(tr, [pair], steps=2, log_path=tmp_path / "t.csv")
    assert tuple(next(csv.reader((tmp_path / "t.csv").open()))) == METRIC_COLUMNS


def test_checkpoint_kind(frame64, tmp_path):
    tr = small_trainer()
    save_checkpoint(tr, tmp_path / "t.pt")
    back = load_texture_checkpoint(tmp_path / "t.pt", tr.gen_cfg)
    assert isinstance(back, TextureTrainer)
    inp = TexturePair.from_frame(frame64).input
    assert np.array_equal(generate_texture(tr.G, inp), generate_texture(back.G, inp))
    other = GANTrainer(GeneratorConfig(in_shape=(32, 16), base_channels=8, depth=3), DiscriminatorConfig(),
                       TrainConfig())
    save_checkpoint(other, tmp_path / "x.pt")
    with pytest.raises(CheckpointError):
        load_texture_checkpoint(tmp_path / "x.pt")


# ------------------------------------------------------ memorisation oracle

@pytest.fixture(scope="module")
def overfit(frame64):
    torch.manual_seed(0)
    pair = TexturePair.from_frame(frame64)
    tr = TextureTrainer(texture_generator_config(64, 64, **ORACLE_GEN), DiscriminatorConfig(), ORACLE_TRAIN)
    fit_texture(tr, [pair], steps=200)
    return pair, generate_texture(tr.G, pair.input)


@pytest.mark.slow
def test_overfit_l1(overfit):
    pair, gen = overfit
    l1 = np.abs(gen.astype(float) - pair.target).mean() / 127.5
    print(f"texture overfit L1 {l1:.4f}")
    assert l1 < 0.05


@pytest.mark.slow
def test_overfit_shirt_color(asset, overfit):
    pair, gen = overfit
    mask = region_mask(asset.uv_regions, "shirt", 64)
    diff = np.abs(gen[mask].mean(axis=0) - pair.target[mask].mean(axis=0))
    print("shirt mean colour error per channel", diff)
    assert np.all(diff <= 20)


@pytest.mark.slow
def test_generated_texture_never_changes_silhouette(asset, frame64, overfit):
    _, gen = overfit
    noise = np.random.default_rng(0).integers(0, 256, gen.shape, dtype=np.uint8)
    mesh = forward(asset, frame64.params)
    for spec in RigConfig().cameras(64):
        ext = camera_world_pose(spec, mesh.joint_transforms)
        _, d_gt = rasterize(mesh, frame64.texture, spec, ext, return_depth=True)
        for tex in (gen, noise):
            _, d = rasterize(mesh, tex, spec, ext, return_depth=True)
            assert np.array_equal(np.isfinite(d), np.isfinite(d_gt))
        assert np.array_equal(np.isfinite(render_depth(mesh, spec, ext)), np.isfinite(d_gt))
