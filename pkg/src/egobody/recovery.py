"""Body-model parameter regression from the front third-person view.

An image encoder feeds an iterative-error-feedback head that refines the
85-dim estimate (72 pose, 10 shape, weak-perspective scale and 2D offset)
starting from the dataset mean. Training minimises

    lam * (reprojection + has_3d * 3D error) + adversarial prior loss.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .body_model import NUM_BETAS, NUM_POSE_PARAMS, BodyModelAsset, BodyParams, canonicalize_axis_angle
from .body_torch import TorchJointModel, batch_rodrigues
from .camera_rig import WeakPerspectiveCam
from .translation import CheckpointError, MetricsLog, TrainingDiverged, cgan_loss, images_to_tensor, save_torch

logger = logging.getLogger(__name__)

THETA_DIM = NUM_POSE_PARAMS + NUM_BETAS + 3
PARAM_DIM = NUM_POSE_PARAMS + NUM_BETAS
CHECKPOINT_FORMAT_VERSION = 1
RECOVERY_COLUMNS = ("step", "loss_total", "loss_reproj", "loss_3d", "loss_adv", "loss_D_prior")


class NoVisibleJointsWarning(UserWarning):
    pass


class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class ThetaFull:
    theta: np.ndarray
    beta: np.ndarray
    cam: WeakPerspectiveCam

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64).reshape(NUM_POSE_PARAMS))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64).reshape(NUM_BETAS))
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.beta))):
            raise ValueError("ThetaFull must be finite")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.beta, self.cam.as_vector()])

    @classmethod
    def from_vector(cls, v) -> "ThetaFull":
        v = np.asarray(v, dtype=np.float64).reshape(THETA_DIM)
        return cls(v[:NUM_POSE_PARAMS], v[NUM_POSE_PARAMS:PARAM_DIM], WeakPerspectiveCam(v[PARAM_DIM], v[PARAM_DIM + 1:]))

    def body_params(self) -> BodyParams:
        return BodyParams(self.beta, canonicalize_axis_angle(self.theta))

    def to_meta(self) -> dict:
        """Same layout as the dataset frame meta files (params + camera)."""
        return {
            "format_version": 1,
            "params": self.body_params().to_dict(),
            "cam": {"s": float(self.cam.s), "t": self.cam.t.tolist()},
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ThetaFull":
        p = meta["params"]
        cam = meta.get("cam") or meta.get("recovery", {}).get("cam")
        return cls(np.asarray(p["theta"]), np.asarray(p["beta"]), WeakPerspectiveCam(cam["s"], cam["t"]))


@dataclass(frozen=True)
class RecoveryTrainConfig:
    lam: float = 60.0
    use_3d_supervision: bool = True
    w_joints3d: float = 1.0
    w_params: float = 1.0
    lr: float = 1e-3
    lr_prior: float = 1e-4
    ief_iterations: int = 3
    image_size: int = 128
    base_channels: int = 32
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0

    def validate(self) -> "RecoveryTrainConfig":
        if self.ief_iterations < 1:
            raise ValueError("ief_iterations must be >= 1")
        if self.image_size < 16 or self.image_size % 16:
            raise ValueError("image_size must be a multiple of 16")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        return self


# ---------------------------------------------------------------- networks

class Regressor(nn.Module):
    def __init__(self, cfg: RecoveryTrainConfig, mean_params: np.ndarray | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.base_channels
        chans = [3, c, 2 * c, 4 * c, 8 * c]
        layers: list[nn.Module] = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 4, 2, 1), nn.GroupNorm(8, b), nn.ReLU()]
        layers += [nn.AdaptiveAvgPool2d(2), nn.Flatten()]
        self.encoder = nn.Sequential(*layers)
        feat = 4 * chans[-1]
        self.head = nn.Sequential(
            nn.Linear(feat + THETA_DIM, 512), nn.ReLU(),
            nn.Linear(512, 512), nn.ReLU(),
        )
        self.decoder = nn.Linear(512, THETA_DIM)
        nn.init.xavier_uniform_(self.decoder.weight, gain=0.01)
        nn.init.zeros_(self.decoder.bias)
        if mean_params is None:
            mean_params = default_mean_params()
        self.register_buffer("mean_params", torch.as_tensor(np.asarray(mean_params), dtype=torch.float32))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        feat = self.encoder(images)
        pred = self.mean_params.expand(images.shape[0], -1)
        for _ in range(self.cfg.ief_iterations):
            pred = pred + self.decoder(self.head(torch.cat([feat, pred], dim=1)))
        return pred


class PriorDiscriminator(nn.Module):
    """Plausibility score for (rotation-matrix pose, shape) vectors."""

    def __init__(self, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(9 * 24 + NUM_BETAS, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )

    def forward(self, params: torch.Tensor) -> torch.Tensor:
        rot = batch_rodrigues(params[:, :NUM_POSE_PARAMS].reshape(-1, 24, 3)).reshape(params.shape[0], -1)
        return self.net(torch.cat([rot, params[:, NUM_POSE_PARAMS:PARAM_DIM]], dim=1))


def default_mean_params(s: float = 0.9) -> np.ndarray:
    m = np.zeros(THETA_DIM)
    m[PARAM_DIM] = s
    return m


def build_regressor(cfg: RecoveryTrainConfig, mean_params=None) -> Regressor:
    return Regressor(cfg, mean_params)


# ------------------------------------------------------------------ losses

def split_theta(pred: torch.Tensor):
    return pred[:, :NUM_POSE_PARAMS], pred[:, NUM_POSE_PARAMS:PARAM_DIM], pred[:, PARAM_DIM], pred[:, PARAM_DIM + 1:]


def project_joints(pred: torch.Tensor, body: TorchJointModel) -> torch.Tensor:
    theta, beta, s, t = split_theta(pred)
    J = body(theta, beta)
    J = J - J[:, :1]
    return s[:, None, None] * J[..., :2] + t[:, None, :]


def reproj_loss(pred: torch.Tensor, joints2d: torch.Tensor, visibility: torch.Tensor,
                body: TorchJointModel) -> torch.Tensor:
    """Mean over samples of the visible-joint L1 reprojection error.

    Each sample's error is summed over visible joints and divided by their
    count. Samples with no visible joint contribute 0; if none in the batch
    has one a ``NoVisibleJointsWarning`` is emitted.
    """
    vis = visibility.to(pred.dtype)
    err = (project_joints(pred, body) - joints2d).abs().sum(-1)
    count = vis.sum(-1)
    if not bool((count > 0).any()):
        warnings.warn("no visible joints in batch; reprojection loss is 0", NoVisibleJointsWarning)
    per_sample = (err * vis).sum(-1) / count.clamp(min=1.0)
    return per_sample.mean()


def loss_3d(pred: torch.Tensor, gt_params: torch.Tensor, gt_joints3d: torch.Tensor, body: TorchJointModel,
            has_3d=None, w_joints: float = 1.0, w_params: float = 1.0) -> torch.Tensor:
    """Root-aligned joint MSE plus parameter MSE over the 82 (theta, beta) entries.

    The joint term is the mean squared Euclidean distance per joint.
    """
    if has_3d is not None and not bool(torch.as_tensor(has_3d).all()):
        raise ContractViolation("loss_3d called on samples without 3D ground truth")
    theta, beta, _, _ = split_theta(pred)
    J = body(theta, beta)
    J = J - J[:, :1]
    G = gt_joints3d - gt_joints3d[:, :1]
    joint_term = ((J - G) ** 2).sum(-1).mean()
    param_term = ((pred[:, :PARAM_DIM] - gt_params) ** 2).mean()
    return w_joints * joint_term + w_params * param_term


def adversarial_prior_step(D_prior: PriorDiscriminator, real_params: torch.Tensor, fake_params: torch.Tensor):
    """(discriminator loss on detached fakes, adversarial loss for the regressor)."""
    loss_d, _ = cgan_loss(D_prior(real_params), D_prior(fake_params.detach()))
    _, loss_adv = cgan_loss(D_prior(real_params).detach(), D_prior(fake_params))
    return loss_d, loss_adv


# ----------------------------------------------------------------- training

@dataclass
class RecoveryBatch:
    images: torch.Tensor
    joints2d: torch.Tensor
    visibility: torch.Tensor
    params: torch.Tensor          # (B, 82) ground-truth (theta_view, beta)
    joints3d: torch.Tensor        # (B, 24, 3) camera-rotated, any translation
    has_3d: torch.Tensor          # (B,) bool

    def subset(self, idx) -> "RecoveryBatch":
        return RecoveryBatch(*(getattr(self, f)[idx] for f in
                               ("images", "joints2d", "visibility", "params", "joints3d", "has_3d")))


def make_batch(frames, body: TorchJointModel, has_3d: bool = True) -> RecoveryBatch:
    images = images_to_tensor([f.tp_front for f in frames])
    rec = [f.meta["recovery"] for f in frames]
    theta = torch.tensor(np.array([r["theta_view"] for r in rec]), dtype=torch.float32)
    beta = torch.tensor(np.array([f.params.beta for f in frames]), dtype=torch.float32)
    with torch.no_grad():
        joints3d = body(theta, beta)
    return RecoveryBatch(
        images=images,
        joints2d=torch.tensor(np.array([r["joints2d_norm"] for r in rec]), dtype=torch.float32),
        visibility=torch.tensor(np.array([r["visibility"] for r in rec]), dtype=torch.bool),
        params=torch.cat([theta, beta], dim=1),
        joints3d=joints3d,
        has_3d=torch.full((len(frames),), has_3d, dtype=torch.bool),
    )


def mean_params_from_frames(frames) -> np.ndarray:
    rec = [f.meta["recovery"] for f in frames]
    m = np.zeros(THETA_DIM)
    m[:NUM_POSE_PARAMS] = np.mean([r["theta_view"] for r in rec], axis=0)
    m[NUM_POSE_PARAMS:PARAM_DIM] = np.mean([f.params.beta for f in frames], axis=0)
    m[PARAM_DIM] = np.mean([r["cam"]["s"] for r in rec])
    m[PARAM_DIM + 1:] = np.mean([r["cam"]["t"] for r in rec], axis=0)
    return m


class RecoveryTrainer:
    kind = "recovery"

    def __init__(self, cfg: RecoveryTrainConfig, asset: BodyModelAsset, mean_params=None, prior_pool=None):
        cfg.validate()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.body = TorchJointModel(asset)
        self.model = build_regressor(cfg, mean_params)
        self.D_prior = PriorDiscriminator()
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        self.opt_prior = torch.optim.Adam(self.D_prior.parameters(), lr=cfg.lr_prior)
        self.prior_pool = None if prior_pool is None else torch.as_tensor(prior_pool, dtype=torch.float32)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0

    def sample_real(self, n: int, fallback: torch.Tensor) -> torch.Tensor:
        if self.prior_pool is None:
            return fallback
        idx = self.rng.choice(len(self.prior_pool), size=n, replace=len(self.prior_pool) < n)
        return self.prior_pool[idx]

    def objective(self, batch: RecoveryBatch, pred=None, real=None):
        """Total loss and its terms; the 3D term only covers samples with
        ground truth and vanishes when supervision is disabled."""
        pred = self.model(batch.images) if pred is None else pred
        l_reproj = reproj_loss(pred, batch.joints2d, batch.visibility, self.body)
        mask = batch.has_3d if self.cfg.use_3d_supervision else torch.zeros_like(batch.has_3d)
        if bool(mask.any()):
            l3d = loss_3d(pred[mask], batch.params[mask], batch.joints3d[mask], self.body,
                          w_joints=self.cfg.w_joints3d, w_params=self.cfg.w_params) * mask.float().mean()
        else:
            l3d = None
        real = self.sample_real(len(pred), batch.params) if real is None else real
        _, l_adv = adversarial_prior_step(self.D_prior, real, pred[:, :PARAM_DIM])
        inner = l_reproj if l3d is None else l_reproj + l3d
        total = self.cfg.lam * inner + l_adv
        return total, {"loss_reproj": l_reproj, "loss_3d": l3d, "loss_adv": l_adv, "pred": pred}


def recovery_train_step(trainer: RecoveryTrainer, batch: RecoveryBatch) -> dict:
    trainer.model.train()
    real = trainer.sample_real(len(batch.images), batch.params)
    trainer.opt.zero_grad(set_to_none=True)
    total, terms = trainer.objective(batch, real=real)
    for name in ("loss_reproj", "loss_3d", "loss_adv"):
        v = terms[name]
        if v is not None and not torch.isfinite(v):
            raise TrainingDiverged(f"non-finite {name}; recovery training diverged")
    total.backward()
    trainer.opt.step()

    trainer.opt_prior.zero_grad(set_to_none=True)
    loss_d, _ = adversarial_prior_step(trainer.D_prior, real, terms["pred"][:, :PARAM_DIM].detach())
    if not torch.isfinite(loss_d):
        raise TrainingDiverged("non-finite loss_D_prior; recovery training diverged")
    loss_d.backward()
    trainer.opt_prior.step()
    trainer.opt.zero_grad(set_to_none=True)
    trainer.step += 1
    return {
        "step": trainer.step,
        "loss_total": total.item(),
        "loss_reproj": terms["loss_reproj"].item(),
        "loss_3d": 0.0 if terms["loss_3d"] is None else terms["loss_3d"].item(),
        "loss_adv": terms["loss_adv"].item(),
        "loss_D_prior": loss_d.item(),
    }


def fit_recovery(trainer: RecoveryTrainer, batch: RecoveryBatch, steps: int | None = None, log_path=None,
                 checkpoint_path=None) -> list[dict]:
    steps = trainer.cfg.steps if steps is None else steps
    log = MetricsLog(log_path, RECOVERY_COLUMNS) if log_path else None
    n = len(batch.images)
    bs = min(trainer.cfg.batch_size, n)
    history = []
    for _ in range(steps):
        idx = torch.as_tensor(trainer.rng.choice(n, size=bs, replace=False))
        m = recovery_train_step(trainer, batch.subset(idx))
        history.append(m)
        if log:
            log.append(m)
    if checkpoint_path:
        save_recovery_checkpoint(trainer, checkpoint_path)
    return history


@torch.no_grad()
def predict(model: Regressor, images: np.ndarray) -> np.ndarray:
    model.eval()
    return model(images_to_tensor(images)).double().numpy()


def recover(model: Regressor, tp_front: np.ndarray) -> ThetaFull:
    """Front third-person uint8 image -> recovered parameters."""
    size = model.cfg.image_size
    if tuple(tp_front.shape[:2]) != (size, size):
        raise ValueError(f"recovery model expects {size}x{size} input, got {tp_front.shape[:2]}")
    v = predict(model, tp_front[None])[0]
    v[:NUM_POSE_PARAMS] = canonicalize_axis_angle(v[:NUM_POSE_PARAMS])
    v[PARAM_DIM] = max(v[PARAM_DIM], 1e-4)
    return ThetaFull.from_vector(v)


# ------------------------------------------------------------- checkpoints

def save_recovery_checkpoint(trainer: RecoveryTrainer, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_torch(path, {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": trainer.kind,
        "config": asdict(trainer.cfg),
        "step": trainer.step,
        "model": trainer.model.state_dict(),
        "D_prior": trainer.D_prior.state_dict(),
        "opt": trainer.opt.state_dict(),
        "opt_prior": trainer.opt_prior.state_dict(),
        "prior_pool": trainer.prior_pool,
        "rng": trainer.rng.bit_generator.state,
    })


def load_recovery_checkpoint(path, asset: BodyModelAsset, expected_image_size: int | None = None) -> RecoveryTrainer:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if ck.get("format_version") != CHECKPOINT_FORMAT_VERSION or ck.get("kind") != "recovery":
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_FORMAT_VERSION} recovery checkpoint")
    cfg = RecoveryTrainConfig(**ck["config"])
    if expected_image_size is not None and cfg.image_size != expected_image_size:
        raise CheckpointError(f"{path}: image_size {cfg.image_size} != expected {expected_image_size}")
    trainer = RecoveryTrainer(cfg, asset, mean_params=ck["model"]["mean_params"].numpy(), prior_pool=ck["prior_pool"])
    trainer.model.load_state_dict(ck["model"])
    trainer.D_prior.load_state_dict(ck["D_prior"])
    trainer.opt.load_state_dict(ck["opt"])
    trainer.opt_prior.load_state_dict(ck["opt_prior"])
    trainer.rng.bit_generator.state = ck["rng"]
    trainer.step = ck["step"]
    return trainer
