"""Conditional GAN for egocentric -> third-person view translation.

U-Net generator, PatchGAN discriminator, the conditional adversarial loss
plus an L1 reconstruction term weighted by ``lambda_l1``. The stochastic
input of the generator is realised as dropout, kept active at inference.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
SIGMA_EPS = 1e-7
METRIC_COLUMNS = ("step", "loss_D", "loss_G_adv", "loss_L1")


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    in_shape: tuple = (256, 128)        # (H, W) of the stacked egocentric input
    out_shape: tuple | None = None      # defaults to in_shape
    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 32
    depth: int = 5
    use_skip_connections: bool = True
    dropout_rate: float = 0.5
    dropout_layers: int = 3

    @property
    def output_shape(self) -> tuple:
        return tuple(self.out_shape) if self.out_shape is not None else tuple(self.in_shape)

    def validate(self) -> "GeneratorConfig":
        h, w = self.output_shape
        k = 2 ** self.depth
        if self.depth < 1:
            raise ValueError("generator depth must be >= 1")
        if h % k or w % k:
            raise ValueError(f"output shape {(h, w)} must be divisible by 2**depth = {k}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        return self


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 6
    base_channels: int = 32
    n_layers: int = 3
    receptive_field: int | None = None   # if set, picks the smallest n_layers reaching it

    def layers(self) -> int:
        if self.receptive_field is None:
            n = self.n_layers
        else:
            n = 1
            while patch_receptive_field(n) < self.receptive_field:
                n += 1
        if n < 1:
            raise ValueError("discriminator needs at least one layer")
        return n


@dataclass(frozen=True)
class TrainConfig:
    lambda_l1: float = 100.0
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 1
    max_steps: int = 2000
    seed: int = 0
    checkpoint_interval: int = 0
    arrangement: str = "C"

    def validate(self) -> "TrainConfig":
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.arrangement not in ("A", "B", "C"):
            raise ValueError("arrangement must be A, B or C")
        return self


def patch_receptive_field(n_layers: int) -> int:
    # n stride-2 4x4 convs followed by one stride-1 4x4 conv
    rf = 4
    for _ in range(n_layers):
        rf = (rf - 1) * 2 + 4
    return rf


# ---------------------------------------------------------------- networks

def _norm(ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch, affine=True)


class UNetGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        chans = [cfg.base_channels * min(2 ** i, 8) for i in range(cfg.depth)]
        self.down = nn.ModuleList()
        prev = cfg.in_channels
        for i, ch in enumerate(chans):
            layers: list[nn.Module] = [nn.Conv2d(prev, ch, 4, 2, 1)]
            # no norm on the outermost and innermost layers
            if 0 < i < cfg.depth - 1:
                layers.append(_norm(ch))
            layers.append(nn.LeakyReLU(0.2))
            self.down.append(nn.Sequential(*layers))
            prev = ch
        self.up = nn.ModuleList()
        for j, i in enumerate(range(cfg.depth - 1, 0, -1)):
            in_ch = chans[i] if (j == 0 or not cfg.use_skip_connections) else 2 * chans[i]
            layers = [nn.ConvTranspose2d(in_ch, chans[i - 1], 4, 2, 1), _norm(chans[i - 1]), nn.ReLU()]
            if j < cfg.dropout_layers and cfg.dropout_rate > 0:
                layers.append(nn.Dropout(cfg.dropout_rate))
            self.up.append(nn.Sequential(*layers))
        last_in = chans[0] * (2 if cfg.use_skip_connections and cfg.depth > 1 else 1)
        self.final = nn.Sequential(nn.ConvTranspose2d(last_in, cfg.out_channels, 4, 2, 1), nn.Tanh())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out_hw = self.cfg.output_shape
        if tuple(x.shape[-2:]) != tuple(self.cfg.in_shape):
            raise ValueError(f"generator expects input {tuple(self.cfg.in_shape)}, got {tuple(x.shape[-2:])}")
        if tuple(x.shape[-2:]) != out_hw:
            x = resample(x, out_hw)
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        for j, layer in enumerate(self.up):
            if j > 0 and self.cfg.use_skip_connections:
                x = torch.cat([x, skips[-1 - j]], dim=1)
            x = layer(x)
        if self.cfg.use_skip_connections and self.cfg.depth > 1:
            x = torch.cat([x, skips[0]], dim=1)
        return self.final(x)


class PatchDiscriminator(nn.Module):
    """Scores each receptive-field patch of (condition, candidate); logits out."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.layers()
        layers: list[nn.Module] = [nn.Conv2d(cfg.in_channels, cfg.base_channels, 4, 2, 1), nn.LeakyReLU(0.2)]
        prev = cfg.base_channels
        for i in range(1, n):
            ch = cfg.base_channels * min(2 ** i, 8)
            layers += [nn.Conv2d(prev, ch, 4, 2, 1), _norm(ch), nn.LeakyReLU(0.2)]
            prev = ch
        layers.append(nn.Conv2d(prev, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, condition: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if condition.shape[-2:] != candidate.shape[-2:]:
            condition = resample(condition, tuple(candidate.shape[-2:]))
        return self.net(torch.cat([condition, candidate], dim=1))


def resample(x: torch.Tensor, size: tuple) -> torch.Tensor:
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)


def build_generator(cfg: GeneratorConfig) -> UNetGenerator:
    return UNetGenerator(cfg)


def build_discriminator(cfg: DiscriminatorConfig) -> PatchDiscriminator:
    return PatchDiscriminator(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def set_dropout(model: nn.Module, active: bool) -> None:
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.train(active)


# ------------------------------------------------------------------ losses

def cgan_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(discriminator loss, non-saturating generator loss) from patch logits."""
    p_real = torch.sigmoid(d_real).clamp(SIGMA_EPS, 1 - SIGMA_EPS)
    p_fake = torch.sigmoid(d_fake).clamp(SIGMA_EPS, 1 - SIGMA_EPS)
    loss_d = -torch.log(p_real).mean() - torch.log(1 - p_fake).mean()
    loss_g = -torch.log(p_fake).mean()
    return loss_d, loss_g


def l1_loss(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if generated.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}")
    return (generated - target).abs().mean()


# ------------------------------------------------------------ image tensors

def images_to_tensor(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images]) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()
    return t / 127.5 - 1.0


def tensor_to_images(t: torch.Tensor) -> np.ndarray:
    arr = ((t.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).cpu().numpy()


# ----------------------------------------------------------------- training

class MetricsLog:
    """Append-only CSV of per-step metrics."""

    def __init__(self, path, columns=METRIC_COLUMNS):
        self.path = Path(path)
        self.columns = tuple(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def append(self, row: dict) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([row[c] for c in self.columns])


class GANTrainer:
    """Generator, discriminator and their optimizers; one instance per run."""

    kind = "translation"

    def __init__(self, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, train_cfg: TrainConfig):
        train_cfg.validate()
        torch.manual_seed(train_cfg.seed)
        self.gen_cfg, self.disc_cfg, self.train_cfg = gen_cfg, disc_cfg, train_cfg
        self.G = build_generator(gen_cfg)
        self.D = build_discriminator(disc_cfg)
        self.opt_G = torch.optim.Adam(self.G.parameters(), lr=train_cfg.lr_g, betas=(train_cfg.beta1, 0.999))
        self.opt_D = torch.optim.Adam(self.D.parameters(), lr=train_cfg.lr_d, betas=(train_cfg.beta1, 0.999))
        self.step = 0
        self.rng = np.random.default_rng(train_cfg.seed)

    def generator_objective(self, x, y, fake=None):
        """Total generator loss and its parts, without stepping anything."""
        fake = self.G(x) if fake is None else fake
        loss_adv = -torch.log(torch.sigmoid(self.D(x, fake)).clamp(SIGMA_EPS, 1 - SIGMA_EPS)).mean()
        loss_l1 = l1_loss(fake, y)
        total = loss_adv if self.train_cfg.lambda_l1 == 0 else loss_adv + self.train_cfg.lambda_l1 * loss_l1
        return total, loss_adv, loss_l1


def _check_finite(**terms):
    for name, v in terms.items():
        if not torch.isfinite(v).all():
            raise TrainingDiverged(f"non-finite {name} ({float(v.detach())}); training diverged")


def train_step(trainer: GANTrainer, x: torch.Tensor, y: torch.Tensor) -> dict:
    """One alternating update: discriminator on (real, detached fake), then
    generator on adversarial + lambda * L1."""
    G, D = trainer.G, trainer.D
    G.train()
    D.train()
    fake = G(x)

    trainer.opt_D.zero_grad(set_to_none=True)
    loss_d, _ = cgan_loss(D(x, y), D(x, fake.detach()))
    _check_finite(loss_D=loss_d)
    loss_d.backward()
    trainer.opt_D.step()

    trainer.opt_G.zero_grad(set_to_none=True)
    total, loss_adv, loss_l1 = trainer.generator_objective(x, y, fake)
    _check_finite(loss_G_adv=loss_adv, loss_L1=loss_l1)
    total.backward()
    trainer.opt_G.step()
    trainer.opt_D.zero_grad(set_to_none=True)

    trainer.step += 1
    return {"step": trainer.step, "loss_D": loss_d.item(), "loss_G_adv": loss_adv.item(), "loss_L1": loss_l1.item()}


def fit(trainer: GANTrainer, inputs: np.ndarray, targets: np.ndarray, steps: int | None = None,
        log_path=None, checkpoint_path=None, callback=None) -> list[dict]:
    """Run ``steps`` train steps over uint8 image arrays (N x H x W x 3).

    Batches are drawn with the trainer's seeded generator so a rerun with the
    same config and data reproduces the metric trace exactly.
    """
    steps = trainer.train_cfg.max_steps if steps is None else steps
    x_all = images_to_tensor(inputs)
    y_all = images_to_tensor(targets)
    log = MetricsLog(log_path) if log_path else None
    bs = min(trainer.train_cfg.batch_size, len(x_all))
    history = []
    for _ in range(steps):
        idx = trainer.rng.choice(len(x_all), size=bs, replace=False)
        m = train_step(trainer, x_all[idx], y_all[idx])
        history.append(m)
        if log:
            log.append(m)
        if callback:
            callback(m)
        ci = trainer.train_cfg.checkpoint_interval
        if checkpoint_path and ci and trainer.step % ci == 0:
            save_checkpoint(trainer, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(trainer, checkpoint_path)
    return history


@torch.no_grad()
def translate(G: UNetGenerator, ego_stacked: np.ndarray, *, dropout: bool = True) -> np.ndarray:
    """Stacked egocentric uint8 image -> arranged third-person uint8 image."""
    if tuple(ego_stacked.shape[:2]) != tuple(G.cfg.in_shape):
        raise ValueError(f"input resolution {ego_stacked.shape[:2]} does not match generator {G.cfg.in_shape}")
    G.eval()
    set_dropout(G, dropout)
    out = G(images_to_tensor(ego_stacked[None]))
    set_dropout(G, False)
    return tensor_to_images(out)[0]


# ------------------------------------------------------------- checkpoints

def save_torch(path, obj) -> None:
    """torch.save with bytes that depend only on ``obj``; a file target would
    embed its own name in the archive."""
    buf = io.BytesIO()
    torch.save(obj, buf)
    Path(path).write_bytes(buf.getvalue())


def save_checkpoint(trainer: GANTrainer, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_torch(path, {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": trainer.kind,
        "generator_config": asdict(trainer.gen_cfg),
        "discriminator_config": asdict(trainer.disc_cfg),
        "train_config": asdict(trainer.train_cfg),
        "step": trainer.step,
        "G": trainer.G.state_dict(),
        "D": trainer.D.state_dict(),
        "opt_G": trainer.opt_G.state_dict(),
        "opt_D": trainer.opt_D.state_dict(),
        "rng": trainer.rng.bit_generator.state,
    })


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_checkpoint(path, expected: GeneratorConfig | None = None, kind: str | None = None) -> GANTrainer:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if ck.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format_version {ck.get('format_version')} "
                              f"!= {CHECKPOINT_FORMAT_VERSION}")
    if kind is not None and ck.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {ck.get('kind')}")
    gen_cfg = GeneratorConfig(**_tuplify(ck["generator_config"]))
    if expected is not None and gen_cfg != expected:
        diff = {k: (getattr(gen_cfg, k), getattr(expected, k)) for k in asdict(gen_cfg)
                if getattr(gen_cfg, k) != getattr(expected, k)}
        raise CheckpointError(f"{path}: generator config mismatch (checkpoint, expected): {diff}")
    trainer = GANTrainer(gen_cfg, DiscriminatorConfig(**ck["discriminator_config"]),
                         TrainConfig(**ck["train_config"]))
    trainer.kind = ck.get("kind", "translation")
    trainer.G.load_state_dict(ck["G"])
    trainer.D.load_state_dict(ck["D"])
    trainer.opt_G.load_state_dict(ck["opt_G"])
    trainer.opt_D.load_state_dict(ck["opt_D"])
    trainer.rng.bit_generator.state = ck["rng"]
    trainer.step = ck["step"]
    return trainer


def output_patch_grid(disc: PatchDiscriminator, hw: tuple) -> tuple[int, int]:
    h, w = hw
    for _ in range(disc.cfg.layers()):
        h, w = h // 2, w // 2
    return h - 1, w - 1

