"""Configuration and the pipeline commands (data generation, the three
trainings, evaluation, inference, export and animation)."""
from __future__ import annotations

import json
import logging
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from .body_model import (
    NUM_POSE_PARAMS, PosedAvatar, canonicalize_axis_angle, export_mesh, forward, load_model_asset,
)
from .dataset import (
    DatasetConfig, arrange_target, arranged_shape, default_asset, generate_dataset, load_manifest, load_split,
    sample_pose_sequence, stack_ego,
)
from .evaluation import evaluate, format_arrangement_table, run_arrangement_experiment, ssim, time_pipeline
from .inference import InferenceModels, animate, render_views, run_inference, turntable_cameras
from .recovery import (
    RecoveryTrainConfig, RecoveryTrainer, ThetaFull, fit_recovery, load_recovery_checkpoint, make_batch,
    mean_params_from_frames,
)
from .renderer import check_texture, load_png, save_png
from .texture import TexturePair, TextureTrainer, fit_texture, load_texture_checkpoint, texture_generator_config
from .translation import (
    DiscriminatorConfig, GANTrainer, GeneratorConfig, TrainConfig, fit, load_checkpoint,
)

logger = logging.getLogger(__name__)

SEQUENCE_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit code 2)."""


class PipelineError(RuntimeError):
    """A command could not run, e.g. a prerequisite artifact is missing (exit code 1)."""


# ------------------------------------------------------------------ config

@dataclass
class GANSection:
    base_channels: int = 32
    depth: int = 5
    use_skip_connections: bool = True
    dropout_rate: float = 0.5
    dropout_layers: int = 3
    disc_base_channels: int = 32
    disc_n_layers: int = 3
    lambda_l1: float = 100.0
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 1
    steps: int = 2000
    seed: int = 0
    checkpoint_interval: int = 0

    def generator_kw(self) -> dict:
        return dict(base_channels=self.base_channels, depth=self.depth, use_skip_connections=self.use_skip_connections,
                    dropout_rate=self.dropout_rate, dropout_layers=self.dropout_layers)

    def discriminator(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(base_channels=self.disc_base_channels, n_layers=self.disc_n_layers)

    def train(self, arrangement: str = "C") -> TrainConfig:
        return TrainConfig(lambda_l1=self.lambda_l1, lr_g=self.lr_g, lr_d=self.lr_d, beta1=self.beta1,
                           batch_size=self.batch_size, max_steps=self.steps, seed=self.seed,
                           checkpoint_interval=self.checkpoint_interval, arrangement=arrangement).validate()


@dataclass
class TranslationSection(GANSection):
    arrangement: str = "C"
    inference_dropout: bool = True


@dataclass
class TextureSection(GANSection):
    pass


@dataclass
class RecoverySection:
    lam: float = 60.0
    use_3d_supervision: bool = True
    w_joints3d: float = 1.0
    w_params: float = 1.0
    lr: float = 1e-3
    lr_prior: float = 1e-4
    ief_iterations: int = 3
    base_channels: int = 32
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0

    def train(self, image_size: int) -> RecoveryTrainConfig:
        return RecoveryTrainConfig(image_size=image_size, **asdict(self)).validate()


@dataclass
class EvalSection:
    split: str = "test"
    max_samples: int = 0            # 0 = whole split
    timing_samples: int = 5
    arrangement_budget: int = 0     # train steps per method; 0 skips the comparison
    arrangement_time_limit: float | None = None


@dataclass
class PipelineConfig:
    seed: int = 0
    output_root: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    translation: TranslationSection = field(default_factory=TranslationSection)
    recovery: RecoverySection = field(default_factory=RecoverySection)
    texture: TextureSection = field(default_factory=TextureSection)
    evaluation: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "PipelineConfig":
        ds = self.dataset
        if ds.resolution < 16 or ds.resolution % 16:
            raise ConfigError("dataset.resolution must be a multiple of 16")
        if ds.texture_size & (ds.texture_size - 1):
            raise ConfigError("dataset.texture_size must be a power of two")
        if ds.sequences < 1 or ds.frames < 1:
            raise ConfigError("dataset.sequences and dataset.frames must be >= 1")
        if ds.asset_path and not Path(ds.asset_path).exists():
            raise ConfigError(f"dataset.asset_path does not exist: {ds.asset_path}")
        if self.translation.arrangement not in ("A", "B", "C"):
            raise ConfigError("translation.arrangement must be A, B or C")
        if self.evaluation.split not in ("train", "val", "test"):
            raise ConfigError("evaluation.split must be train, val or test")
        try:
            self.translation_generator().validate()
            self.texture_generator().validate()
            self.recovery.train(ds.resolution)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    # derived paths and model configs
    @property
    def out(self) -> Path:
        return Path(self.output_root)

    def checkpoint(self, kind: str) -> Path:
        return self.out / "checkpoints" / f"{kind}.pt"

    def metrics(self, kind: str) -> Path:
        return self.out / "metrics" / f"{kind}.csv"

    def translation_generator(self) -> GeneratorConfig:
        r = self.dataset.resolution
        return GeneratorConfig(in_shape=(2 * r, r), out_shape=arranged_shape((r, r), self.translation.arrangement),
                               **self.translation.generator_kw())

    def texture_generator(self) -> GeneratorConfig:
        return texture_generator_config(self.dataset.resolution, self.dataset.texture_size,
                                        **self.texture.generator_kw())


def _coerce(default, value, where: str, ftype: str = ""):
    if default is None and value is not None and ftype.startswith("float"):
        default = 0.0
    if is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a mapping")
        return _build(type(default), value, where)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, (int, float)):
        if isinstance(value, str):
            # YAML 1.1 reads forms such as 2e-3 as strings
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where} must be a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        if isinstance(default, float):
            return float(value)
        if not float(value).is_integer():
            raise ConfigError(f"{where} must be an integer")
        return int(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string")
    return value


def _build(cls, data: dict, where: str = ""):
    defaults = cls()
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{where}{k}' for k in unknown)}")
    types = {f.name: str(f.type) for f in fields(cls)}
    kw = {}
    for k, v in data.items():
        d = getattr(defaults, k)
        kw[k] = _coerce(d, v, f"{where}{k}." if is_dataclass(d) else f"{where}{k}", types[k])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data or {}).validate()


def config_to_dict(cfg: PipelineConfig) -> dict:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x
    return plain(asdict(cfg))


def apply_overrides(data: dict, overrides: dict) -> dict:
    """Dotted ``section.key`` overrides; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data or {}))
    for key, raw in overrides.items():
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw) if isinstance(raw, str) else raw
    return data


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(apply_overrides(data, overrides or {}))


# ---------------------------------------------------------------- helpers

def _asset(cfg: PipelineConfig):
    return load_model_asset(cfg.dataset.asset_path) if cfg.dataset.asset_path else default_asset(cfg.dataset.asset_seed)


def _manifest(cfg: PipelineConfig):
    path = Path(cfg.dataset.root) / "manifest.json"
    if not path.exists():
        raise PipelineError(f"no dataset at {cfg.dataset.root}; run `pipeline gen-data --config <path>` first")
    m = load_manifest(path)
    if m.config_hash != cfg.dataset.hash():
        raise PipelineError(f"dataset at {cfg.dataset.root} was generated with a different dataset config; "
                            "re-run `pipeline gen-data`")
    return m


def _split(cfg: PipelineConfig, name: str):
    frames = load_split(_manifest(cfg), name)
    if not frames:
        raise PipelineError(f"dataset split '{name}' is empty")
    return frames


TRAIN_COMMANDS = {"translation": "train-translate", "recovery": "train-recover", "texture": "train-texture"}


def _require_checkpoint(cfg: PipelineConfig, kind: str) -> Path:
    path = cfg.checkpoint(kind)
    if not path.exists():
        raise PipelineError(f"missing {kind} checkpoint {path}; run `pipeline {TRAIN_COMMANDS[kind]} --config <path>`")
    return path


def load_models(cfg: PipelineConfig) -> InferenceModels:
    asset = _asset(cfg)
    t = load_checkpoint(_require_checkpoint(cfg, "translation"), cfg.translation_generator(), kind="translation")
    r = load_recovery_checkpoint(_require_checkpoint(cfg, "recovery"), asset, cfg.dataset.resolution)
    x = load_texture_checkpoint(_require_checkpoint(cfg, "texture"), cfg.texture_generator())
    return InferenceModels(t.G, r.model, x.G, asset, cfg.translation.arrangement, cfg.translation.inference_dropout)


def _seed_inference(cfg: PipelineConfig):
    torch.manual_seed(cfg.seed)


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: PipelineConfig) -> dict:
    m = generate_dataset(cfg.dataset, cfg.seed)
    return {"manifest": m.path, "frames": m.frame_count, "manifest_sha256": m.file_hash()}


def cmd_train_translate(cfg: PipelineConfig) -> dict:
    frames = _split(cfg, "train")
    method = cfg.translation.arrangement
    trainer = GANTrainer(cfg.translation_generator(), cfg.translation.discriminator(), cfg.translation.train(method))
    x = np.stack([stack_ego(f.ego_front, f.ego_back) for f in frames])
    y = np.stack([arrange_target(f.tp_front, f.tp_back, method) for f in frames])
    log = cfg.metrics("translation")
    log.unlink(missing_ok=True)
    hist = fit(trainer, x, y, cfg.translation.steps, log_path=log, checkpoint_path=cfg.checkpoint("translation"))
    return {"checkpoint": cfg.checkpoint("translation"), "metrics": log, "steps": trainer.step,
            "last": hist[-1] if hist else None}


def cmd_train_recover(cfg: PipelineConfig) -> dict:
    frames = _split(cfg, "train")
    asset = _asset(cfg)
    rcfg = cfg.recovery.train(cfg.dataset.resolution)
    trainer = RecoveryTrainer(rcfg, asset, mean_params=mean_params_from_frames(frames))
    batch = make_batch(frames, trainer.body, has_3d=True)
    trainer.prior_pool = batch.params.clone()
    log = cfg.metrics("recovery")
    log.unlink(missing_ok=True)
    hist = fit_recovery(trainer, batch, rcfg.steps, log_path=log, checkpoint_path=cfg.checkpoint("recovery"))
    return {"checkpoint": cfg.checkpoint("recovery"), "metrics": log, "steps": trainer.step,
            "last": hist[-1] if hist else None}


def cmd_train_texture(cfg: PipelineConfig) -> dict:
    frames = _split(cfg, "train")
    pairs = [TexturePair.from_frame(f) for f in frames]
    trainer = TextureTrainer(cfg.texture_generator(), cfg.texture.discriminator(), cfg.texture.train("C"))
    log = cfg.metrics("texture")
    log.unlink(missing_ok=True)
    hist = fit_texture(trainer, pairs, cfg.texture.steps, log_path=log, checkpoint_path=cfg.checkpoint("texture"))
    return {"checkpoint": cfg.checkpoint("texture"), "metrics": log, "steps": trainer.step,
            "last": hist[-1] if hist else None}


def cmd_eval(cfg: PipelineConfig) -> dict:
    models = load_models(cfg)
    frames = _split(cfg, cfg.evaluation.split)
    if cfg.evaluation.max_samples:
        frames = frames[: cfg.evaluation.max_samples]
    _seed_inference(cfg)
    report = evaluate(models, frames)
    out_dir = cfg.out / "eval"
    paths = report.save(out_dir)
    summary = report.summary()
    if cfg.evaluation.timing_samples:
        timing = time_pipeline(models, [(f.ego_front, f.ego_back) for f in frames[: cfg.evaluation.timing_samples]])
        (out_dir / "timing.json").write_text(json.dumps(timing, indent=2))
        paths["timing"] = out_dir / "timing.json"
    if cfg.evaluation.arrangement_budget:
        rows = run_arrangement_experiment(
            _split(cfg, "train"), frames, cfg.evaluation.arrangement_budget,
            gen_kw=cfg.translation.generator_kw(),
            train_kw={k: v for k, v in asdict(cfg.translation.train()).items() if k != "arrangement"},
            time_limit=cfg.evaluation.arrangement_time_limit,
        )
        (out_dir / "arrangement.json").write_text(json.dumps([asdict(r) for r in rows], indent=2))
        paths["arrangement"] = out_dir / "arrangement.json"
        summary += "\n\n" + format_arrangement_table(rows)
    (out_dir / "summary.txt").write_text(summary + "\n")
    paths["summary"] = out_dir / "summary.txt"
    return {"paths": paths, "summary": summary, "aggregate": report.aggregate()}


def _write_params(path: Path, theta: ThetaFull):
    path.write_text(json.dumps(theta.to_meta(), indent=1, sort_keys=True) + "\n")


def read_params(path) -> ThetaFull:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"params file not found: {path}")
    try:
        return ThetaFull.from_meta(json.loads(path.read_text()))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed params file ({exc})") from None


def _load_image(path, what: str) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} image not found: {path}")
    return load_png(path)


def _export_bundle(out: Path, mesh, texture: np.ndarray, theta: ThetaFull, resolution: int) -> None:
    save_png(out / "texture.png", texture)
    export_mesh(mesh, out / "mesh.obj", skeleton_path=out / "skeleton.txt", texture_file="texture.png")
    _write_params(out / "params.txt", theta)
    for name, img in render_views(mesh, texture, turntable_cameras(resolution)).items():
        save_png(out / "views" / f"{name}.png", img)


def _atomic_output(out: Path, build) -> Path:
    """Run ``build(tmp_dir)`` and move the result to ``out``; nothing is left
    behind if it fails."""
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        build(tmp)
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def cmd_infer(cfg: PipelineConfig, ego_front, ego_back, out=None) -> dict:
    models = load_models(cfg)
    front, back = _load_image(ego_front, "ego_front"), _load_image(ego_back, "ego_back")
    r = cfg.dataset.resolution
    if front.shape[:2] != (r, r) or back.shape[:2] != (r, r):
        raise ConfigError(f"egocentric images must be {r}x{r} to match the trained models")
    out = Path(out) if out else cfg.out / "infer"
    _seed_inference(cfg)
    result = run_inference(models, front, back)
    _atomic_output(out, lambda d: _export_bundle(d, result.mesh, result.texture, result.theta, r))
    return {"out": out, "timings": result.timings}


def cmd_export(cfg: PipelineConfig, params, texture, out=None, pose_override=None) -> dict:
    """Re-export a mesh bundle from a params file, optionally in a different pose."""
    theta = read_params(params)
    tex = check_texture(_load_image(texture, "texture"))
    if pose_override is not None:
        theta = ThetaFull(_read_sequence(pose_override)[0], theta.beta, theta.cam)
    mesh = forward(_asset(cfg), theta.body_params())
    out = Path(out) if out else cfg.out / "export"
    _atomic_output(out, lambda d: _export_bundle(d, mesh, tex, theta, cfg.dataset.resolution))
    return {"out": out}


def _read_sequence(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"pose sequence not found: {path}")
    try:
        data = json.loads(path.read_text())
        if data.get("format_version") != SEQUENCE_FORMAT_VERSION:
            raise ValueError(f"format_version must be {SEQUENCE_FORMAT_VERSION}")
        thetas = np.asarray(data["thetas"], dtype=np.float64)
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise ConfigError(f"{path}: malformed pose sequence ({exc})") from None
    if thetas.ndim != 2 or thetas.shape[1] != NUM_POSE_PARAMS or len(thetas) == 0:
        raise ConfigError(f"{path}: expected a non-empty list of {NUM_POSE_PARAMS}-value poses")
    if not np.all(np.isfinite(thetas)):
        raise ConfigError(f"{path}: non-finite pose values")
    return np.stack([canonicalize_axis_angle(t) for t in thetas])


def write_sequence(path, thetas) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"format_version": SEQUENCE_FORMAT_VERSION,
                                "thetas": np.asarray(thetas, dtype=np.float64).tolist()}) + "\n")
    return path


def cmd_sample_poses(cfg: PipelineConfig, out, frames: int = 30, style: str = "walk", seed: int | None = None) -> dict:
    try:
        poses = sample_pose_sequence(cfg.seed if seed is None else seed, frames, style)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return {"out": write_sequence(out, [p.theta for p in poses]), "frames": len(poses)}


def cmd_animate(cfg: PipelineConfig, params, sequence, texture, out=None, reference_texture=None) -> dict:
    """Pose the recovered body (shape fixed once) with each pose in
    ``sequence`` and render it from the front turntable camera.

    With ``reference_texture`` every frame is also rendered with that texture
    and the per-frame SSIM between the two renders is reported.
    """
    theta = read_params(params)
    tex = check_texture(_load_image(texture, "texture"))
    thetas = _read_sequence(sequence)
    avatar = PosedAvatar(_asset(cfg), theta.beta)
    shape_hash = avatar.shape_hash()
    camera = turntable_cameras(cfg.dataset.resolution)[0]
    frames = animate(avatar, tex, thetas, camera)
    scores = None
    if reference_texture is not None:
        ref = check_texture(_load_image(reference_texture, "reference texture"))
        scores = [ssim(a, b) for a, b in zip(frames, animate(avatar, ref, thetas, camera))]
    if avatar.shape_hash() != shape_hash:
        raise PipelineError("body shape changed during animation")
    out = Path(out) if out else cfg.out / "animate"
    info = {"format_version": 1, "frames": len(frames), "beta": theta.beta.tolist(), "shape_hash": shape_hash}
    if scores is not None:
        info["ssim_vs_reference"] = scores

    def build(d: Path):
        for i, img in enumerate(frames):
            save_png(d / f"frame_{i:05d}.png", img)
        (d / "animation.json").write_text(json.dumps(info, indent=1) + "\n")
    _atomic_output(out, build)
    result = {"out": out, "frames": len(frames), "shape_hash": shape_hash}
    if scores is not None:
        result["mean_ssim_vs_reference"] = float(np.mean(scores))
    return result
