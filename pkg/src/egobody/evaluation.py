"""Image and pose metrics, the arrangement comparison and stage timing.

Ground-truth 2D joints come from the synthetic renderer rather than an
external keypoint detector, so the joint metric has no detector noise.
RMSE is in 8-bit intensity units (0-255).
"""
from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from scipy.ndimage import correlate1d

from .body_model import BodyParams, forward
from .camera_rig import normalized_to_pixels
from .dataset import arrange_target, arranged_shape, stack_ego, unarrange_target
from .inference import STAGES, InferenceModels, stage_recover, stage_texture, stage_translate
from .renderer import DEFAULT_BG, foreground_mask
from .translation import (
    DiscriminatorConfig, GANTrainer, GeneratorConfig, TrainConfig, images_to_tensor, train_step, translate,
)

SSIM_SIGMA = 1.5
SSIM_WIN = 11
SSIM_K1, SSIM_K2 = 0.01, 0.03
REFERENCE_ARRANGEMENT = {"A": (89.0, 0.67), "B": (53.2, 0.72), "C": (40.1, 0.89)}
REFERENCE_TIMINGS = {"view_translation": 0.6, "parameter_estimation": 0.12, "texture_generation": 0.56}
REFERENCE_HARDWARE = "Tesla K80"
REPORT_NOTES = [
    "2D joint ground truth is the renderer's exact joint projection, not an external detector",
    "RMSE is in 8-bit intensity units (0-255), over all channels",
    "SSIM is computed on ITU-R 601 luma with an 11x11 Gaussian window (sigma 1.5)",
]


# ---------------------------------------------------------------- metrics

def _same_shape(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _gaussian_window() -> np.ndarray:
    r = SSIM_WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-x**2 / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter(img, g):
    out = correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    r = SSIM_WIN // 2
    return out[r:-r, r:-r]


def ssim(a, b, data_range: float = 255.0) -> float:
    """Mean SSIM over all fully-contained window positions."""
    a, b = _same_shape(a, b)
    a, b = luma(a), luma(b)
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    g = _gaussian_window()
    C1, C2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    var_a = _filter(a * a, g) - mu_a**2
    var_b = _filter(b * b, g) - mu_b**2
    cov = _filter(a * b, g) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2))
    return float(s.mean())


def joints_rmse(pred, gt, visibility) -> float:
    """sqrt of the mean squared joint displacement over visible joints (pixels)."""
    pred, gt = _same_shape(pred, gt)
    vis = np.asarray(visibility, dtype=bool)
    if not vis.any():
        raise ValueError("joints_rmse needs at least one visible joint")
    d = pred[vis] - gt[vis]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


def root_aligned_errors(pred_params: BodyParams, gt_params: BodyParams, asset):
    """Per-joint and per-vertex Euclidean errors (metres) after root alignment."""
    p, g = forward(asset, pred_params), forward(asset, gt_params)
    pj, gj = p.joints3d - p.joints3d[0], g.joints3d - g.joints3d[0]
    pv, gv = p.vertices - p.joints3d[0], g.vertices - g.joints3d[0]
    return np.linalg.norm(pj - gj, axis=1), np.linalg.norm(pv - gv, axis=1)


# ----------------------------------------------------------------- report

@dataclass
class EvalReport:
    rmse: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    joints_rmse: list = field(default_factory=list)
    joint_error_3d: list = field(default_factory=list)     # per sample: 24 errors (m)
    vertex_error: list = field(default_factory=list)       # per sample: mean vertex error (m)
    timings: dict = field(default_factory=lambda: {s: [] for s in STAGES})
    sample_ids: list = field(default_factory=list)
    notes: list = field(default_factory=lambda: list(REPORT_NOTES))

    def add(self, sample_id, *, rmse_v, ssim_v, joints_rmse_v, joint_err, vertex_err, timings=None):
        self.sample_ids.append(sample_id)
        self.rmse.append(float(rmse_v))
        self.ssim.append(float(ssim_v))
        self.joints_rmse.append(float(joints_rmse_v))
        self.joint_error_3d.append([float(x) for x in joint_err])
        self.vertex_error.append(float(vertex_err))
        for k, v in (timings or {}).items():
            self.timings[k].append(float(v))

    def aggregate(self) -> dict:
        def mean(xs):
            return float(np.mean(xs)) if len(xs) else float("nan")
        return {
            "n": len(self.sample_ids),
            "rmse": mean(self.rmse),
            "ssim": mean(self.ssim),
            "joints_rmse_px": mean(self.joints_rmse),
            "mpjpe_m": mean([np.mean(e) for e in self.joint_error_3d]),
            "per_joint_error_m": (np.mean(self.joint_error_3d, axis=0).tolist() if self.joint_error_3d else []),
            "vertex_error_m": mean(self.vertex_error),
            "timings_s": {k: mean(v) for k, v in self.timings.items()},
        }

    def to_dict(self) -> dict:
        return {"format_version": 1, "notes": self.notes, "aggregate": self.aggregate(), "samples": asdict(self)}

    def save(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(json.dumps(self.to_dict(), indent=2))
        with (out / "eval_samples.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "rmse", "ssim", "joints_rmse_px", "mpjpe_m", "vertex_error_m"])
            for i, sid in enumerate(self.sample_ids):
                w.writerow([sid, self.rmse[i], self.ssim[i], self.joints_rmse[i],
                            float(np.mean(self.joint_error_3d[i])), self.vertex_error[i]])
        return {"json": out / "eval_report.json", "csv": out / "eval_samples.csv"}

    def summary(self) -> str:
        a = self.aggregate()
        lines = [f"# {n}" for n in self.notes]
        lines.append(f"samples: {a['n']}")
        lines.append(f"view translation: RMSE {a['rmse']:.2f}  SSIM {a['ssim']:.3f}")
        lines.append(f"2D joints: RMSE {a['joints_rmse_px']:.2f} px")
        lines.append(f"3D: MPJPE {100 * a['mpjpe_m']:.2f} cm  vertex error {100 * a['vertex_error_m']:.2f} cm")
        for k, v in a["timings_s"].items():
            lines.append(f"time {k}: {v:.4f} s")
        return "\n".join(lines)


def predicted_joints2d(theta, asset, resolution) -> np.ndarray:
    """Recovered joints projected with the recovered weak-perspective camera, in pixels."""
    mesh = forward(asset, theta.body_params())
    J = mesh.joints3d - mesh.joints3d[0]
    return normalized_to_pixels(theta.cam.s * J[:, :2] + theta.cam.t, resolution)


def evaluate(models: InferenceModels, frames) -> EvalReport:
    """Run the full pipeline on each frame and score every stage."""
    report = EvalReport()
    for f in frames:
        t0 = time.perf_counter()
        arranged, front, back = stage_translate(models, f.ego_front, f.ego_back)
        t1 = time.perf_counter()
        theta, _ = stage_recover(models, front)
        t2 = time.perf_counter()
        stage_texture(models, front, back)
        t3 = time.perf_counter()
        target = arrange_target(f.tp_front, f.tp_back, models.arrangement)
        res = (f.tp_front.shape[1], f.tp_front.shape[0])
        gt_params = BodyParams(f.params.beta, np.asarray(f.meta["recovery"]["theta_view"]))
        jerr, verr = root_aligned_errors(theta.body_params(), gt_params, models.asset)
        report.add(
            f"{f.sequence_id}/{f.frame_id}",
            rmse_v=rmse(arranged, target), ssim_v=ssim(arranged, target),
            joints_rmse_v=joints_rmse(predicted_joints2d(theta, models.asset, res),
                                      np.asarray(f.joints2d_tp_front), np.asarray(f.visibility_tp_front, bool)),
            joint_err=jerr, vertex_err=float(np.mean(verr)),
            timings=dict(zip(STAGES, (t1 - t0, t2 - t1, t3 - t2))),
        )
    return report


# ------------------------------------------------- arrangement experiment

def crop_subject(generated, target, bg_color=DEFAULT_BG, pad: int = 4):
    """Crop both images to the target's subject bounding box and scale back up
    to the original size."""
    mask = foreground_mask(target, bg_color)
    if not mask.any():
        return generated, target
    rows, cols = np.nonzero(mask)
    H, W = mask.shape
    r0, r1 = max(rows.min() - pad, 0), min(rows.max() + pad + 1, H)
    c0, c1 = max(cols.min() - pad, 0), min(cols.max() + pad + 1, W)

    def up(img):
        return np.asarray(PILImage.fromarray(np.ascontiguousarray(img[r0:r1, c0:c1]))
                          .resize((W, H), PILImage.BILINEAR))
    return up(generated), up(target)


def method_a_views(generated, target):
    """Method A scores each view separately after cropping to the subject."""
    out = []
    for g, t in zip(unarrange_target(generated, "A"), unarrange_target(target, "A")):
        out.append(crop_subject(g, t))
    return out


@dataclass
class ArrangementRow:
    method: str
    rmse: float
    ssim: float
    ref_rmse: float
    ref_ssim: float
    steps: int
    partial: bool = False


def run_arrangement_experiment(train_frames, test_frames, train_budget: int, *, gen_kw=None, train_kw=None,
                               time_limit: float | None = None, dropout: bool = True) -> list[ArrangementRow]:
    """Train one translation model per arrangement with identical settings and
    score each on ``test_frames``.

    A method that cannot finish its ``train_budget`` steps within
    ``time_limit`` seconds is reported with ``partial=True``.
    """
    if train_budget < 1:
        raise ValueError("train_budget must be >= 1 step")
    view_hw = train_frames[0].tp_front.shape[:2]
    x_train = images_to_tensor([stack_ego(f.ego_front, f.ego_back) for f in train_frames])
    rows = []
    deadline = None if time_limit is None else time.perf_counter() + time_limit
    for method in ("A", "B", "C"):
        gen_cfg = GeneratorConfig(in_shape=(2 * view_hw[0], view_hw[1]), out_shape=arranged_shape(view_hw, method),
                                  **(gen_kw or {}))
        trainer = GANTrainer(gen_cfg, DiscriminatorConfig(), TrainConfig(arrangement=method, **(train_kw or {})))
        y_train = images_to_tensor([arrange_target(f.tp_front, f.tp_back, method) for f in train_frames])
        bs = min(trainer.train_cfg.batch_size, len(x_train))
        partial = False
        for _ in range(train_budget):
            if deadline is not None and time.perf_counter() > deadline:
                partial = True
                break
            idx = trainer.rng.choice(len(x_train), size=bs, replace=False)
            train_step(trainer, x_train[idx], y_train[idx])
        r_vals, s_vals = [], []
        for f in test_frames:
            gen = translate(trainer.G, stack_ego(f.ego_front, f.ego_back), dropout=dropout)
            tgt = arrange_target(f.tp_front, f.tp_back, method)
            pairs = method_a_views(gen, tgt) if method == "A" else [(gen, tgt)]
            r_vals.append(np.mean([rmse(g, t) for g, t in pairs]))
            s_vals.append(np.mean([ssim(g, t) for g, t in pairs]))
        ref = REFERENCE_ARRANGEMENT[method]
        rows.append(ArrangementRow(method, float(np.mean(r_vals)), float(np.mean(s_vals)), ref[0], ref[1],
                                   trainer.step, partial))
    return rows


def format_arrangement_table(rows) -> str:
    lines = ["method  RMSE     SSIM    ref_RMSE    ref_SSIM    steps  status"]
    for r in rows:
        lines.append(f"{r.method:<7} {r.rmse:<8.2f} {r.ssim:<7.3f} {r.ref_rmse:<11} {r.ref_ssim:<11} "
                     f"{r.steps:<6} {'partial' if r.partial else 'complete'}")
    return "\n".join(lines)


# ----------------------------------------------------------------- timing

def hardware_string() -> str:
    return f"{platform.platform()} | {platform.processor() or platform.machine()} | torch threads {torch.get_num_threads()}"


def time_pipeline(models: InferenceModels, samples, n_warmup: int = 3) -> dict:
    """Mean and std wall-clock seconds per stage over ``samples``
    (ego_front, ego_back pairs); the first ``n_warmup`` runs are discarded."""
    samples = list(samples)
    times = {s: [] for s in STAGES}
    seq = [samples[i % len(samples)] for i in range(n_warmup)] + samples
    for k, (ego_front, ego_back) in enumerate(seq):
        t0 = time.perf_counter()
        _, front, back = stage_translate(models, ego_front, ego_back)
        t1 = time.perf_counter()
        stage_recover(models, front)
        t2 = time.perf_counter()
        stage_texture(models, front, back)
        t3 = time.perf_counter()
        if k >= n_warmup:
            for s, dt in zip(STAGES, (t1 - t0, t2 - t1, t3 - t2)):
                times[s].append(dt)
    return {
        "stages": {s: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)} for s, v in times.items()},
        "hardware": hardware_string(),
        "reference": {"seconds": dict(REFERENCE_TIMINGS), "hardware": REFERENCE_HARDWARE},
    }
