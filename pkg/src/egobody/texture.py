"""Arranged third-person views -> UV texture map, with the same cGAN
machinery as view translation but a square texture-sized output."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dataset import arrange_target, arranged_shape
from .renderer import check_texture
from .translation import (
    DiscriminatorConfig, GANTrainer, GeneratorConfig, TrainConfig, UNetGenerator,
    fit, images_to_tensor, load_checkpoint, set_dropout, tensor_to_images, train_step,
)

TEXTURE_METHOD = "C"


@dataclass(frozen=True)
class TexturePair:
    input: np.ndarray     # Method C arranged third-person image
    target: np.ndarray    # T x T x 3 uint8 texture

    def __post_init__(self):
        check_texture(self.target)
        if self.input.dtype != np.uint8 or self.input.ndim != 3:
            raise ValueError("texture input must be an HxWx3 uint8 image")

    @classmethod
    def from_frame(cls, frame) -> "TexturePair":
        return cls(arrange_target(frame.tp_front, frame.tp_back, TEXTURE_METHOD), frame.texture)


def texture_generator_config(view_size: int, texture_size: int = 256, **kw) -> GeneratorConfig:
    if texture_size & (texture_size - 1):
        raise ValueError(f"texture size must be a power of two, got {texture_size}")
    return GeneratorConfig(in_shape=arranged_shape((view_size, view_size), TEXTURE_METHOD),
                           out_shape=(texture_size, texture_size), **kw)


class TextureTrainer(GANTrainer):
    kind = "texture"

    def __init__(self, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, train_cfg: TrainConfig):
        h, w = gen_cfg.output_shape
        if h != w or h & (h - 1):
            raise ValueError(f"texture output must be square power-of-two, got {(h, w)}")
        super().__init__(gen_cfg, disc_cfg, train_cfg)


def _stack(pairs):
    return np.stack([p.input for p in pairs]), np.stack([p.target for p in pairs])


def train_texture_step(trainer: TextureTrainer, pairs) -> dict:
    x, y = _stack(pairs)
    return train_step(trainer, images_to_tensor(x), images_to_tensor(y))


def fit_texture(trainer: TextureTrainer, pairs, steps=None, log_path=None, checkpoint_path=None) -> list[dict]:
    x, y = _stack(pairs)
    return fit(trainer, x, y, steps, log_path=log_path, checkpoint_path=checkpoint_path)


@torch.no_grad()
def generate_texture(G: UNetGenerator, tp_arranged: np.ndarray, *, dropout: bool = False) -> np.ndarray:
    """Method C arranged uint8 image -> T x T x 3 uint8 texture."""
    if tuple(tp_arranged.shape[:2]) != tuple(G.cfg.in_shape):
        raise ValueError(f"input resolution {tp_arranged.shape[:2]} does not match texture model {G.cfg.in_shape}")
    G.eval()
    set_dropout(G, dropout)
    out = tensor_to_images(G(images_to_tensor(tp_arranged[None])))[0]
    set_dropout(G, False)
    return check_texture(np.ascontiguousarray(out))


def load_texture_checkpoint(path, expected: GeneratorConfig | None = None) -> TextureTrainer:
    trainer = load_checkpoint(path, expected, kind="texture")
    trainer.__class__ = TextureTrainer
    return trainer
