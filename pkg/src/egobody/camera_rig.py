"""Four-camera rig (two headset cameras, two hip-anchored third-person cameras)
and the pinhole / weak-perspective projections.

Camera frames are OpenGL-style: x right, y up, looking down -z. Pixel
coordinates put (0, 0) at the top-left corner of the image with pixel
centres at half-integers.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .body_model import HEAD_JOINT, ROOT_JOINT, rodrigues


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class CameraSpec:
    name: str
    attach_joint: int
    local_offset: np.ndarray
    local_rotation: np.ndarray
    fov_deg: float
    resolution: tuple[int, int]          # (W, H)
    # "full" follows the joint rotation; "yaw" keeps the camera gravity-aligned
    follow: str = "full"

    def __post_init__(self):
        R = np.asarray(self.local_rotation, dtype=np.float64)
        object.__setattr__(self, "local_rotation", R)
        object.__setattr__(self, "local_offset", np.asarray(self.local_offset, dtype=np.float64))
        object.__setattr__(self, "resolution", tuple(int(x) for x in self.resolution))
        if not 10.0 < self.fov_deg < 175.0:
            raise ValueError(f"fov_deg must be in (10, 175), got {self.fov_deg}")
        if min(self.resolution) <= 0:
            raise ValueError("resolution must be positive")
        if R.shape != (3, 3) or np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ValueError("local_rotation must be orthonormal")
        if self.follow not in ("full", "yaw"):
            raise ValueError(f"follow must be 'full' or 'yaw', got {self.follow!r}")

    @property
    def focal(self) -> float:
        return focal_length(self.fov_deg, self.resolution[1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["local_offset"] = self.local_offset.tolist()
        d["local_rotation"] = self.local_rotation.tolist()
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSpec":
        return cls(**d)

    def with_resolution(self, resolution) -> "CameraSpec":
        d = self.to_dict()
        d["resolution"] = tuple(resolution)
        return CameraSpec.from_dict(d)


@dataclass(frozen=True)
class WeakPerspectiveCam:
    s: float
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(2)
        object.__setattr__(self, "t", t)
        if not (np.isfinite(self.s) and np.all(np.isfinite(t))):
            raise ValueError("weak-perspective camera must be finite")
        if self.s <= 0:
            raise ValueError(f"weak-perspective scale must be positive, got {self.s}")

    def as_vector(self) -> np.ndarray:
        return np.array([self.s, self.t[0], self.t[1]])


def focal_length(fov_deg: float, height: int) -> float:
    return (height / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)


def rig_default(resolution=(256, 256), ego_fov_deg: float = 110.0, tp_fov_deg: float = 48.0,
                tp_distance: float = 2.5, tp_height: float = 0.3) -> list[CameraSpec]:
    """Front/back headset cameras on the head joint, front/back third-person
    cameras on the hip joint, in that order."""
    # third-person cameras aim slightly below their own height, at hip + 5 cm
    tp_pitch = np.arctan2(tp_height - 0.05, tp_distance)
    return [
        CameraSpec("ego_front", HEAD_JOINT, np.array([0.0, -0.10, 0.12]),
                   rot_y(np.pi) @ rot_x(-np.deg2rad(60.0)), ego_fov_deg, resolution),
        CameraSpec("ego_back", HEAD_JOINT, np.array([0.0, -0.02, -0.10]),
                   rot_x(-np.deg2rad(45.0)), ego_fov_deg, resolution),
        CameraSpec("tp_front", ROOT_JOINT, np.array([0.0, tp_height, tp_distance]),
                   rot_x(-tp_pitch), tp_fov_deg, resolution, follow="yaw"),
        CameraSpec("tp_back", ROOT_JOINT, np.array([0.0, tp_height, -tp_distance]),
                   rot_y(np.pi) @ rot_x(-tp_pitch), tp_fov_deg, resolution, follow="yaw"),
    ]


def heading_rotation(R: np.ndarray) -> np.ndarray:
    """Rotation about the vertical axis sharing the heading of ``R``.

    The heading is read from the lateral axis, which stays horizontal through
    flips about that axis; the forward axis is the fallback when the body is
    rolled onto its side.
    """
    lateral = R @ np.array([1.0, 0.0, 0.0])
    if np.hypot(lateral[0], lateral[2]) > 1e-3:
        yaw = np.arctan2(-lateral[2], lateral[0])
    else:
        fwd = R @ np.array([0.0, 0.0, 1.0])
        yaw = np.arctan2(fwd[0], fwd[2])
    return rot_y(yaw)


def attach_frame(spec: CameraSpec, joint_transforms: np.ndarray) -> np.ndarray:
    """World frame the camera is rigidly attached to."""
    j = spec.attach_joint
    if not 0 <= j < len(joint_transforms):
        raise IndexError(f"camera {spec.name}: attach joint {j} out of range")
    G = np.array(joint_transforms[j], dtype=np.float64)
    if spec.follow == "yaw":
        G[:3, :3] = heading_rotation(G[:3, :3])
    return G


def camera_world_pose(spec: CameraSpec, joint_transforms: np.ndarray) -> np.ndarray:
    """4x4 camera-to-world matrix."""
    local = np.eye(4)
    local[:3, :3] = spec.local_rotation
    local[:3, 3] = spec.local_offset
    return attach_frame(spec, joint_transforms) @ local


def world_to_camera(points: np.ndarray, extrinsic: np.ndarray) -> np.ndarray:
    R, c = extrinsic[:3, :3], extrinsic[:3, 3]
    return (np.asarray(points, dtype=np.float64) - c) @ R


def project_pinhole(points, extrinsic, fov_deg, resolution) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to pixels; returns (N x 2 pixels, N depths).

    Depth is distance along the optical axis; points behind the camera get a
    negative depth and their pixel coordinates are meaningless.
    """
    W, H = resolution
    pc = world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3), extrinsic)
    depth = -pc[:, 2]
    f = focal_length(fov_deg, H)
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(np.abs(depth) < 1e-12, 1e-12, depth)
        u = W / 2.0 + f * pc[:, 0] / safe
        v = H / 2.0 - f * pc[:, 1] / safe
    return np.stack([u, v], axis=1), depth


def project_weak_perspective(points, cam: WeakPerspectiveCam, root_rotation=None) -> np.ndarray:
    """x = s * drop_depth(R X) + t, in normalised image units (y up)."""
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if root_rotation is not None:
        X = X @ np.asarray(root_rotation, dtype=np.float64).T
    return cam.s * X[:, :2] + cam.t


def pixels_to_normalized(px: np.ndarray, resolution) -> np.ndarray:
    """Pixel coordinates to the [-1, 1] normalised frame (y up, unit = H/2)."""
    W, H = resolution
    px = np.asarray(px, dtype=np.float64)
    return np.stack([(px[..., 0] - W / 2.0) / (H / 2.0), -(px[..., 1] - H / 2.0) / (H / 2.0)], axis=-1)


def normalized_to_pixels(xy: np.ndarray, resolution) -> np.ndarray:
    W, H = resolution
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([xy[..., 0] * H / 2.0 + W / 2.0, -xy[..., 1] * H / 2.0 + H / 2.0], axis=-1)


def fit_weak_perspective(points3d: np.ndarray, points2d: np.ndarray, weights=None) -> WeakPerspectiveCam:
    """Least-squares (s, t) mapping the x/y of ``points3d`` onto ``points2d``."""
    X = np.asarray(points3d, dtype=np.float64)[:, :2]
    y = np.asarray(points2d, dtype=np.float64)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=np.float64)
    # unknowns (s, tx, ty); rows for x and y coordinates
    A = np.zeros((2 * len(X), 3))
    A[0::2, 0], A[0::2, 1] = X[:, 0], 1.0
    A[1::2, 0], A[1::2, 2] = X[:, 1], 1.0
    b = y.reshape(-1)
    sw = np.sqrt(np.repeat(w, 2))
    sol, *_ = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    return WeakPerspectiveCam(float(sol[0]), sol[1:])


def camera_relative_root(theta: np.ndarray, extrinsic: np.ndarray) -> np.ndarray:
    """Pose vector with the root rotation expressed in the camera frame."""
    from .body_model import rotation_to_axis_angle

    theta = np.array(theta, dtype=np.float64).reshape(-1)
    R_root = rodrigues(theta[:3])
    theta[:3] = rotation_to_axis_angle(extrinsic[:3, :3].T @ R_root)
    return theta
