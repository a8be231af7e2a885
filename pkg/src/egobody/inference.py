"""End-to-end inference: egocentric pair -> third-person views -> body
parameters -> textured, rigged mesh."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .body_model import BodyModelAsset, MeshAsset, PosedAvatar, forward
from .camera_rig import CameraSpec, camera_world_pose, rot_x, rot_y
from .dataset import arrange_target, stack_ego, unarrange_target
from .recovery import Regressor, ThetaFull, recover
from .renderer import DEFAULT_BG, rasterize
from .texture import TEXTURE_METHOD, generate_texture
from .translation import UNetGenerator, translate

STAGES = ("view_translation", "parameter_estimation", "texture_generation")
TURNTABLE_YAWS = (0.0, 90.0, 180.0, 270.0)


@dataclass
class InferenceModels:
    translator: UNetGenerator
    regressor: Regressor
    texturer: UNetGenerator
    asset: BodyModelAsset
    arrangement: str = "C"
    translation_dropout: bool = True

    def __post_init__(self):
        view = self.translator.cfg.in_shape[0] // 2
        if self.regressor.cfg.image_size != view:
            raise ValueError(f"recovery model expects {self.regressor.cfg.image_size}px views, "
                             f"translator produces {view}px")
        if tuple(self.texturer.cfg.in_shape) != (2 * view, view):
            raise ValueError(f"texture model input {self.texturer.cfg.in_shape} does not match {view}px views")

    @property
    def view_size(self) -> int:
        return self.translator.cfg.in_shape[0] // 2


@dataclass
class InferenceResult:
    arranged: np.ndarray
    tp_front: np.ndarray
    tp_back: np.ndarray
    theta: ThetaFull
    mesh: MeshAsset
    texture: np.ndarray
    timings: dict = field(default_factory=dict)


def stage_translate(models: InferenceModels, ego_front, ego_back):
    arranged = translate(models.translator, stack_ego(ego_front, ego_back), dropout=models.translation_dropout)
    front, back = unarrange_target(arranged, models.arrangement)
    return arranged, front, back


def stage_recover(models: InferenceModels, tp_front):
    theta = recover(models.regressor, tp_front)
    return theta, forward(models.asset, theta.body_params())


def stage_texture(models: InferenceModels, tp_front, tp_back):
    return generate_texture(models.texturer, arrange_target(tp_front, tp_back, TEXTURE_METHOD))


def run_inference(models: InferenceModels, ego_front: np.ndarray, ego_back: np.ndarray) -> InferenceResult:
    t0 = time.perf_counter()
    arranged, front, back = stage_translate(models, ego_front, ego_back)
    t1 = time.perf_counter()
    theta, mesh = stage_recover(models, front)
    t2 = time.perf_counter()
    texture = stage_texture(models, front, back)
    t3 = time.perf_counter()
    timings = dict(zip(STAGES, (t1 - t0, t2 - t1, t3 - t2)))
    return InferenceResult(arranged, front, back, theta, mesh, texture, timings)


def turntable_cameras(resolution: int, fov_deg: float = 48.0, distance: float = 2.5, height: float = 0.3,
                      yaws=TURNTABLE_YAWS) -> list[CameraSpec]:
    """Hip-anchored cameras orbiting the body at the given yaw angles (degrees)."""
    pitch = np.arctan2(height - 0.05, distance)
    cams = []
    for yaw in yaws:
        R = rot_y(np.deg2rad(yaw))
        cams.append(CameraSpec(f"view_{int(round(yaw)):03d}", 0, R @ np.array([0.0, height, distance]),
                               R @ rot_x(-pitch), fov_deg, (resolution, resolution), follow="yaw"))
    return cams


def render_views(mesh: MeshAsset, texture: np.ndarray, cameras, bg_color=DEFAULT_BG) -> dict:
    return {spec.name: rasterize(mesh, texture, spec, camera_world_pose(spec, mesh.joint_transforms), bg_color)
            for spec in cameras}


def animate(avatar: PosedAvatar, texture: np.ndarray, thetas, camera: CameraSpec, bg_color=DEFAULT_BG):
    """Re-pose a fixed-shape avatar per frame; the mesh shape is built once."""
    frames = []
    for theta in thetas:
        mesh = avatar.pose(theta)
        frames.append(rasterize(mesh, texture, camera, camera_world_pose(camera, mesh.joint_transforms), bg_color))
    return frames
