"""SMPL-compatible parametric body model with a procedural stand-in asset.

The forward function follows the usual SMPL composition: linear shape
blendshapes, joint regression, forward kinematics over a 24-joint tree and
linear blend skinning. ``make_procedural_humanoid`` builds a license-free
low-poly asset with the same skeleton topology so nothing here needs the
official model files.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

NUM_JOINTS = 24
NUM_BETAS = 10
NUM_POSE_PARAMS = 3 * NUM_JOINTS
SKELETON_FORMAT_VERSION = 1

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)
SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21],
    dtype=np.int64,
)
HEAD_JOINT = 15
ROOT_JOINT = 0

_SMALL_ANGLE = 1e-8


class AssetValidationError(ValueError):
    """An asset failed one of its structural invariants."""


class ObjParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class BodyParams:
    beta: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if beta.shape != (NUM_BETAS,):
            raise ValueError(f"beta must have {NUM_BETAS} entries, got {beta.size}")
        if theta.shape != (NUM_POSE_PARAMS,):
            raise ValueError(f"theta must have {NUM_POSE_PARAMS} entries, got {theta.size}")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(theta))):
            raise ValueError("body parameters must be finite")
        norms = np.linalg.norm(theta.reshape(NUM_JOINTS, 3), axis=1)
        if np.any(norms > np.pi + 1e-6):
            raise ValueError("theta contains an axis-angle with norm > pi; canonicalize first")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls) -> "BodyParams":
        return cls(np.zeros(NUM_BETAS), np.zeros(NUM_POSE_PARAMS))

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "theta": self.theta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(np.asarray(d["beta"]), np.asarray(d["theta"]))


@dataclass(frozen=True, eq=False)
class BodyModelAsset:
    template_vertices: np.ndarray
    shape_dirs: np.ndarray
    pose_dirs: np.ndarray
    joint_regressor: np.ndarray
    parents: np.ndarray
    skin_weights: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    # region name -> list of (u0, v0, u1, v1) rectangles in the UV atlas
    uv_regions: dict = field(default_factory=dict)

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    def validate(self) -> "BodyModelAsset":
        validate_asset(self)
        return self


@dataclass(frozen=True, eq=False)
class MeshAsset:
    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    joints3d: np.ndarray
    joint_transforms: np.ndarray
    skeleton: np.ndarray
    skin_weights: np.ndarray
    joint_radii: np.ndarray | None = None
    rest_joints: np.ndarray | None = None

    @classmethod
    def empty(cls) -> "MeshAsset":
        eye = np.tile(np.eye(4), (NUM_JOINTS, 1, 1))
        return cls(
            vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64),
            uv_coords=np.zeros((0, 2)), joints3d=np.zeros((NUM_JOINTS, 3)),
            joint_transforms=eye, skeleton=SMPL_PARENTS.copy(),
            skin_weights=np.zeros((0, NUM_JOINTS)),
        )


# ---------------------------------------------------------------- rotations

def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(omega) -> np.ndarray:
    """Axis-angle 3-vector to a 3x3 rotation matrix."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(omega)):
        raise ValueError(f"rodrigues: non-finite axis-angle {omega}")
    angle = np.linalg.norm(omega)
    K = skew(omega)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    return np.eye(3) + (np.sin(angle) / angle) * K + ((1.0 - np.cos(angle)) / angle**2) * (K @ K)


def rodrigues_batch(omegas: np.ndarray) -> np.ndarray:
    omegas = np.asarray(omegas, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(omegas)):
        raise ValueError("rodrigues: non-finite axis-angle")
    angle = np.linalg.norm(omegas, axis=1)
    K = np.zeros((len(omegas), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -omegas[:, 2], omegas[:, 1]
    K[:, 1, 0], K[:, 1, 2] = omegas[:, 2], -omegas[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -omegas[:, 1], omegas[:, 0]
    KK = K @ K
    small = angle < _SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * KK


def rotation_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Inverse of rodrigues, returning the vector with norm in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-7:
        return 0.5 * w
    if np.pi - angle < 1e-4:
        # near a half turn the skew part vanishes; read the axis off R + I
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(max(M[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, w) < 0:
            axis = -axis
        return axis * angle
    return w * (angle / (2.0 * np.sin(angle)))


def canonicalize_axis_angle(theta: np.ndarray) -> np.ndarray:
    """Map every axis-angle triplet to the equivalent one with norm <= pi."""
    aa = np.asarray(theta, dtype=np.float64).reshape(-1, 3).copy()
    norms = np.linalg.norm(aa, axis=1)
    wrapped = np.mod(norms + np.pi, 2 * np.pi) - np.pi
    nz = norms > 0
    aa[nz] *= (wrapped[nz] / norms[nz])[:, None]
    return aa.reshape(np.shape(theta))


# ------------------------------------------------------------ forward model

def shape_blend(asset: BodyModelAsset, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if beta.shape[0] != asset.shape_dirs.shape[2]:
        raise ValueError(
            f"beta has {beta.shape[0]} entries, asset expects {asset.shape_dirs.shape[2]}"
        )
    return asset.template_vertices + asset.shape_dirs @ beta


def joint_locations(asset: BodyModelAsset, shaped_vertices: np.ndarray) -> np.ndarray:
    shaped_vertices = np.asarray(shaped_vertices, dtype=np.float64)
    if shaped_vertices.shape != (asset.joint_regressor.shape[1], 3):
        raise ValueError(
            f"expected vertices of shape ({asset.joint_regressor.shape[1]}, 3), "
            f"got {shaped_vertices.shape}"
        )
    J = asset.joint_regressor @ shaped_vertices
    if not np.all(np.isfinite(J)):
        raise ValueError("joint regression produced non-finite values")
    return J


def kinematic_order(parents) -> list[int]:
    """Topological order of the joint tree; raises on cycles or bad roots."""
    parents = np.asarray(parents, dtype=np.int64)
    n = len(parents)
    children: dict[int, list[int]] = {i: [] for i in range(-1, n)}
    for i, p in enumerate(parents):
        if p < -1 or p >= n or p == i:
            raise ValueError(f"invalid parent {p} for joint {i}")
        children[int(p)].append(i)
    order: list[int] = []
    stack = list(reversed(children[-1]))
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        raise ValueError("parents array contains a cycle (not every joint reaches the root)")
    return order


def forward_kinematics(joints: np.ndarray, parents, theta) -> np.ndarray:
    """World transforms (24x4x4) of every joint for axis-angle pose ``theta``."""
    joints = np.asarray(joints, dtype=np.float64)
    parents = np.asarray(parents, dtype=np.int64)
    order = kinematic_order(parents)
    rots = rodrigues_batch(np.asarray(theta, dtype=np.float64).reshape(-1, 3))
    if len(rots) != len(joints):
        raise ValueError("theta and joints disagree on the number of joints")
    G = np.zeros((len(joints), 4, 4))
    for k in order:
        local = np.eye(4)
        local[:3, :3] = rots[k]
        p = parents[k]
        if p < 0:
            local[:3, 3] = joints[k]
            G[k] = local
        else:
            local[:3, 3] = joints[k] - joints[p]
            G[k] = G[p] @ local
    return G


def _pose_feature(transforms: np.ndarray, parents: np.ndarray) -> np.ndarray:
    feats = []
    for k in range(1, len(parents)):
        R_local = transforms[parents[k], :3, :3].T @ transforms[k, :3, :3]
        feats.append((R_local - np.eye(3)).reshape(-1))
    return np.concatenate(feats)


def skin(asset: BodyModelAsset, shaped_vertices: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Linear blend skinning of shaped (rest-pose) vertices."""
    shaped_vertices = np.asarray(shaped_vertices, dtype=np.float64)
    transforms = np.asarray(transforms, dtype=np.float64)
    if transforms.shape != (asset.skin_weights.shape[1], 4, 4):
        raise ValueError(f"transforms must be ({asset.skin_weights.shape[1]}, 4, 4)")
    rest_joints = joint_locations(asset, shaped_vertices)
    v = shaped_vertices
    if np.any(asset.pose_dirs):
        v = v + asset.pose_dirs @ _pose_feature(transforms, asset.parents)
    A = transforms.copy()
    # G_k @ inverse(rest transform): rest transforms are pure translations
    A[:, :3, 3] -= np.einsum("kij,kj->ki", transforms[:, :3, :3], rest_joints)
    T = np.einsum("vk,kij->vij", asset.skin_weights, A)
    return np.einsum("vij,vj->vi", T[:, :3, :3], v) + T[:, :3, 3]


def _joint_radii(asset: BodyModelAsset, shaped: np.ndarray, rest_joints: np.ndarray) -> np.ndarray:
    radii = np.zeros(len(rest_joints))
    for j in range(len(rest_joints)):
        support = asset.joint_regressor[j] > 0
        if support.any():
            radii[j] = np.mean(np.linalg.norm(shaped[support] - rest_joints[j], axis=1))
    return radii


def forward(asset: BodyModelAsset, params: BodyParams) -> MeshAsset:
    shaped = shape_blend(asset, params.beta)
    rest_joints = joint_locations(asset, shaped)
    G = forward_kinematics(rest_joints, asset.parents, params.theta)
    verts = skin(asset, shaped, G)
    return MeshAsset(
        vertices=verts,
        faces=asset.faces,
        uv_coords=asset.uv_coords,
        joints3d=G[:, :3, 3].copy(),
        joint_transforms=G,
        skeleton=asset.parents.copy(),
        skin_weights=asset.skin_weights,
        joint_radii=_joint_radii(asset, shaped, rest_joints),
        rest_joints=rest_joints,
    )


class PosedAvatar:
    """A body whose shape is fixed once; only the pose changes afterwards."""

    def __init__(self, asset: BodyModelAsset, beta):
        self.asset = asset
        self.beta = np.asarray(beta, dtype=np.float64).copy()
        self.shaped = shape_blend(asset, self.beta)
        self.shaped.setflags(write=False)
        self.rest_joints = joint_locations(asset, self.shaped)
        self._radii = _joint_radii(asset, self.shaped, self.rest_joints)

    def shape_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.shaped).tobytes()).hexdigest()

    def pose(self, theta) -> MeshAsset:
        G = forward_kinematics(self.rest_joints, self.asset.parents, theta)
        return MeshAsset(
            vertices=skin(self.asset, self.shaped, G),
            faces=self.asset.faces, uv_coords=self.asset.uv_coords,
            joints3d=G[:, :3, 3].copy(), joint_transforms=G,
            skeleton=self.asset.parents.copy(), skin_weights=self.asset.skin_weights,
            joint_radii=self._radii, rest_joints=self.rest_joints,
        )


# --------------------------------------------------------------- validation

def validate_asset(asset: BodyModelAsset) -> None:
    V = asset.template_vertices.shape[0]
    J = len(asset.parents)

    def fail(name, msg):
        raise AssetValidationError(f"{name}: {msg}")

    if asset.template_vertices.shape != (V, 3):
        fail("template_vertices", "must be Vx3")
    if asset.shape_dirs.ndim != 3 or asset.shape_dirs.shape[:2] != (V, 3):
        fail("shape_dirs", f"must be {V}x3xB, got {asset.shape_dirs.shape}")
    if asset.pose_dirs.shape != (V, 3, 9 * (J - 1)):
        fail("pose_dirs", f"must be {V}x3x{9 * (J - 1)}, got {asset.pose_dirs.shape}")
    if asset.joint_regressor.shape != (J, V):
        fail("joint_regressor", f"must be {J}x{V}")
    if np.any(np.abs(asset.joint_regressor.sum(axis=1) - 1.0) > 1e-6):
        fail("joint_regressor", "rows must sum to 1")
    if asset.skin_weights.shape != (V, J):
        fail("skin_weights", f"must be {V}x{J}")
    if np.any(asset.skin_weights < 0):
        fail("skin_weights", "entries must be non-negative")
    if np.any(np.abs(asset.skin_weights.sum(axis=1) - 1.0) > 1e-6):
        fail("skin_weights", "rows must sum to 1")
    if asset.parents[0] != -1 or any(asset.parents[i] >= i or asset.parents[i] < 0 for i in range(1, J)):
        fail("parents", "must form a tree rooted at 0 with parents[i] < i")
    faces = asset.faces
    if faces.ndim != 2 or faces.shape[1] != 3:
        fail("faces", "must be Fx3")
    if faces.size and (faces.min() < 0 or faces.max() >= V):
        fail("faces", "vertex index out of range")
    if asset.uv_coords.shape != (V, 2):
        fail("uv_coords", f"must be {V}x2")
    if np.any(asset.uv_coords < 0) or np.any(asset.uv_coords > 1):
        fail("uv_coords", "must lie in [0, 1]")
    for name in ("template_vertices", "shape_dirs", "pose_dirs", "uv_coords"):
        if not np.all(np.isfinite(getattr(asset, name))):
            fail(name, "non-finite values")


# ------------------------------------------------------- procedural humanoid

REST_JOINTS = np.array([
    [0.0, 0.95, 0.0],       # pelvis
    [0.09, 0.88, 0.0],      # left_hip
    [-0.09, 0.88, 0.0],
    [0.0, 1.07, 0.0],       # spine1
    [0.095, 0.50, 0.01],    # left_knee
    [-0.095, 0.50, 0.01],
    [0.0, 1.19, 0.0],       # spine2
    [0.10, 0.09, -0.02],    # left_ankle
    [-0.10, 0.09, -0.02],
    [0.0, 1.27, 0.0],       # spine3
    [0.11, 0.03, 0.11],     # left_foot
    [-0.11, 0.03, 0.11],
    [0.0, 1.47, 0.0],       # neck
    [0.07, 1.40, 0.0],      # left_collar
    [-0.07, 1.40, 0.0],
    [0.0, 1.56, 0.01],      # head
    [0.19, 1.41, 0.0],      # left_shoulder
    [-0.19, 1.41, 0.0],
    [0.45, 1.41, -0.01],    # left_elbow
    [-0.45, 1.41, -0.01],
    [0.70, 1.41, 0.0],      # left_wrist
    [-0.70, 1.41, 0.0],
    [0.78, 1.41, 0.0],      # left_hand
    [-0.78, 1.41, 0.0],
])

# torso rings: (height, half-width x, half-depth z); joint rings must sit on
# the pelvis/spine heights so the regressor reproduces them exactly
_TORSO_RINGS = [
    (0.80, 0.150, 0.105), (0.88, 0.165, 0.110), (0.95, 0.160, 0.108),
    (1.01, 0.145, 0.102), (1.07, 0.140, 0.100), (1.13, 0.148, 0.104),
    (1.19, 0.160, 0.108), (1.27, 0.170, 0.110), (1.35, 0.172, 0.105),
    (1.42, 0.160, 0.090), (1.47, 0.090, 0.070),
]
_TORSO_WEIGHT_KEYS = [
    (0.80, {0: 1.0}), (0.95, {0: 1.0}), (1.01, {0: 0.5, 3: 0.5}), (1.07, {3: 1.0}),
    (1.13, {3: 0.5, 6: 0.5}), (1.19, {6: 1.0}), (1.23, {6: 0.5, 9: 0.5}),
    (1.27, {9: 1.0}), (1.47, {9: 1.0}),
]
_TORSO_JOINT_RINGS = {0: 2, 3: 4, 6: 6, 9: 7}
_PANTS_LINE = 0.98


@dataclass
class _Part:
    name: str
    owner: int
    start: np.ndarray
    end: np.ndarray
    # (t, radius_a, radius_b) samples along the segment
    profile: list
    blend_start: int | None
    blend_end: int | None
    region: str
    side: float = 0.0
    kind: str = "limb"


def _limb_parts() -> list[_Part]:
    J = REST_JOINTS
    parts = []
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        L = 0 if side == "left" else 1
        idx = lambda left_idx: left_idx + L  # noqa: E731  right joint follows left
        parts += [
            _Part(f"{side}_thigh", idx(1), J[idx(1)], J[idx(4)],
                  [(0, .075, .075), (.3, .068, .068), (.7, .055, .055), (1, .05, .05)],
                  0, idx(4), "pants", sgn),
            _Part(f"{side}_shin", idx(4), J[idx(4)], J[idx(7)],
                  [(0, .05, .05), (.3, .05, .052), (.7, .04, .04), (1, .035, .035)],
                  idx(1), idx(7), "pants", sgn),
            _Part(f"{side}_foot", idx(7), J[idx(7)], J[idx(10)],
                  [(0, .042, .038), (.5, .048, .034), (1, .045, .03)],
                  idx(4), idx(10), "shoes", sgn),
            _Part(f"{side}_toes", idx(10), J[idx(10)], J[idx(10)] + np.array([0, -0.005, 0.08]),
                  [(0, .045, .03), (.6, .04, .025), (1, .025, .015)],
                  idx(7), None, "shoes", sgn),
            _Part(f"{side}_collar", idx(13), J[idx(13)], J[idx(16)],
                  [(0, .06, .06), (1, .055, .055)], 9, idx(16), "shirt", sgn),
            _Part(f"{side}_upper_arm", idx(16), J[idx(16)], J[idx(18)],
                  [(0, .052, .052), (.5, .046, .046), (1, .04, .04)],
                  idx(13), idx(18), "shirt", sgn),
            _Part(f"{side}_forearm", idx(18), J[idx(18)], J[idx(20)],
                  [(0, .04, .04), (.5, .036, .036), (1, .03, .03)],
                  idx(16), idx(20), "skin", sgn),
            _Part(f"{side}_hand", idx(20), J[idx(20)], J[idx(22)],
                  [(0, .03, .022), (1, .042, .02)], idx(18), idx(22), "skin", sgn),
            _Part(f"{side}_fingers", idx(22), J[idx(22)], J[idx(22)] + np.array([sgn * 0.08, 0, 0]),
                  [(0, .042, .02), (.6, .04, .017), (1, .025, .012)],
                  idx(20), None, "skin", sgn),
        ]
    parts += [
        _Part("neck", 12, J[12], J[15], [(0, .055, .055), (1, .05, .05)], 9, 15, "skin"),
        _Part("head", 15, J[15], J[15] + np.array([0, 0.19, 0.0]),
              [(0, .06, .065), (.25, .09, .095), (.55, .095, .1), (.85, .07, .075), (1, .02, .02)],
              12, None, "skin"),
    ]
    return parts


def _perp_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = d / np.linalg.norm(d)
    # keep the "a" axis horizontal when possible so ellipses stay flat
    ref = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.9 else np.array([0.0, 0.0, 1.0])
    a = np.cross(ref, d)
    a /= np.linalg.norm(a)
    b = np.cross(d, a)
    return a, b


def _blend_weights(t: float, owner: int, start: int | None, end: int | None) -> dict:
    w = {owner: 1.0}
    if start is not None and t < 0.2:
        f = 0.5 * (1.0 - t / 0.2)
        w = {owner: 1.0 - f, start: f}
    elif end is not None and t > 0.8:
        f = 0.5 * (t - 0.8) / 0.2
        w = {owner: 1.0 - f, end: f}
    return w


def _torso_weights(y: float) -> dict:
    keys = _TORSO_WEIGHT_KEYS
    if y <= keys[0][0]:
        return dict(keys[0][1])
    for (y0, w0), (y1, w1) in zip(keys[:-1], keys[1:]):
        if y <= y1:
            a = (y - y0) / (y1 - y0)
            out: dict = {}
            for j, v in w0.items():
                out[j] = out.get(j, 0.0) + (1 - a) * v
            for j, v in w1.items():
                out[j] = out.get(j, 0.0) + a * v
            return {j: v for j, v in out.items() if v > 0}
    return dict(keys[-1][1])


class _MeshBuilder:
    def __init__(self, n_cells: int):
        self.verts: list = []
        self.uvs: list = []
        self.weights: list = []
        self.centers: list = []   # ring centre per vertex (for shape directions)
        self.part_of: list = []
        self.faces: list = []
        self.regions: dict = {}
        self.ring_of_joint: dict = {}
        self.grid = int(np.ceil(np.sqrt(n_cells)))
        self.cell = 1.0 / self.grid
        self.margin = 0.01

    def cell_rect(self, k: int):
        r, c = divmod(k, self.grid)
        u0 = c * self.cell + self.margin
        v0 = r * self.cell + self.margin
        return u0, v0, u0 + self.cell - 2 * self.margin, v0 + self.cell - 2 * self.margin

    def add(self, p, uv, w, center, part):
        self.verts.append(np.asarray(p, dtype=np.float64))
        self.uvs.append(uv)
        self.weights.append(w)
        self.centers.append(np.asarray(center, dtype=np.float64))
        self.part_of.append(part)
        return len(self.verts) - 1

    def tube(self, part_idx, centers, axes_a, axes_b, radii, ts, weights, n_around, rect):
        """Closed tube with per-ring UVs; returns the vertex ids of each ring."""
        u0, v0, u1, v1 = rect
        rings = []
        for c, a, b, (ra, rb), t, w in zip(centers, axes_a, axes_b, radii, ts, weights):
            ring = []
            for i in range(n_around + 1):     # last column duplicates the seam
                phi = 2 * np.pi * i / n_around
                p = c + ra * np.cos(phi) * a + rb * np.sin(phi) * b
                uv = (u0 + (u1 - u0) * i / n_around, v0 + (v1 - v0) * t)
                ring.append(self.add(p, uv, w, c, part_idx))
            rings.append(ring)
        for r0, r1 in zip(rings[:-1], rings[1:]):
            for i in range(n_around):
                self.faces.append((r0[i], r0[i + 1], r1[i + 1]))
                self.faces.append((r0[i], r1[i + 1], r1[i]))
        for ring, t, c, w in ((rings[0], 0.0, centers[0], weights[0]), (rings[-1], 1.0, centers[-1], weights[-1])):
            uc = (u0 + u1) / 2
            vc = v0 + (v1 - v0) * t
            ci = self.add(c, (uc, vc), w, c, part_idx)
            for i in range(n_around):
                self.faces.append((ci, ring[i], ring[i + 1]))
        return rings


def make_procedural_humanoid(seed: int = 0, n_around: int = 12) -> BodyModelAsset:
    """Low-poly capsule-limb humanoid with the SMPL 24-joint skeleton.

    The seed only jitters the shape directions slightly; the same seed always
    yields bit-identical arrays.
    """
    rng = np.random.default_rng(seed)
    limb_parts = _limb_parts()
    b = _MeshBuilder(len(limb_parts) + 1)
    part_names = ["torso"] + [p.name for p in limb_parts]
    part_kind = ["torso"] + ["head" if p.name == "head" else ("arm" if p.name.split("_", 1)[-1] in
                 ("collar", "upper_arm", "forearm", "hand", "fingers") else
                 ("leg" if p.owner in (1, 2, 4, 5, 7, 8, 10, 11) else "neck")) for p in limb_parts]
    joint_ring: dict[int, list[int]] = {}

    # torso: vertical tube with elliptic rings, 16 around for a smoother trunk
    n_torso = 16
    rect = b.cell_rect(0)
    ys = [r[0] for r in _TORSO_RINGS]
    y0, y1 = ys[0], ys[-1]
    rings = b.tube(
        0,
        [np.array([0.0, y, 0.0]) for y in ys],
        [np.array([1.0, 0.0, 0.0])] * len(ys),
        [np.array([0.0, 0.0, -1.0])] * len(ys),
        [(r[1], r[2]) for r in _TORSO_RINGS],
        [(y - y0) / (y1 - y0) for y in ys],
        [_torso_weights(y) for y in ys],
        n_torso, rect,
    )
    for j, ri in _TORSO_JOINT_RINGS.items():
        joint_ring[j] = rings[ri][:-1]
    tp = (_PANTS_LINE - y0) / (y1 - y0)
    u0, v0, u1, v1 = rect
    b.regions.setdefault("pants", []).append((u0, v0, u1, v0 + (v1 - v0) * tp))
    b.regions.setdefault("shirt", []).append((u0, v0 + (v1 - v0) * tp, u1, v1))

    for k, part in enumerate(limb_parts, start=1):
        d = part.end - part.start
        a_ax, b_ax = _perp_basis(d)
        ts = [p[0] for p in part.profile]
        rect = b.cell_rect(k)
        rings = b.tube(
            k,
            [part.start + t * d for t in ts],
            [a_ax] * len(ts), [b_ax] * len(ts),
            [(p[1], p[2]) for p in part.profile],
            ts,
            [_blend_weights(t, part.owner, part.blend_start, part.blend_end) for t in ts],
            n_around, rect,
        )
        joint_ring[part.owner] = rings[0][:-1]
        b.regions.setdefault(part.region, []).append(rect)

    V = len(b.verts)
    verts = np.array(b.verts)
    centers = np.array(b.centers)
    radial = verts - centers
    part_of = np.array(b.part_of)
    kind = np.array([part_kind[p] for p in part_of])

    weights = np.zeros((V, NUM_JOINTS))
    for i, w in enumerate(b.weights):
        for j, v in w.items():
            weights[i, j] = v
    weights /= weights.sum(axis=1, keepdims=True)

    regressor = np.zeros((NUM_JOINTS, V))
    for j in range(NUM_JOINTS):
        ids = joint_ring[j]
        regressor[j, ids] = 1.0 / len(ids)

    is_arm = kind == "arm"
    is_leg = kind == "leg"
    is_torso = kind == "torso"
    side = np.sign(centers[:, 0])
    jitter = 1.0 + 0.05 * rng.uniform(-1, 1, size=NUM_BETAS)
    dirs = np.zeros((V, 3, NUM_BETAS))
    # 0 overall height, stretched up from the floor
    dirs[:, 1, 0] = 0.045 * verts[:, 1]
    # 1 girth everywhere
    dirs[:, :, 1] = np.where(is_torso[:, None], 0.14, 0.08) * radial
    # 2 leg length: everything above the hips rides up, legs stretch
    dirs[:, 1, 2] = 0.05 * np.minimum(centers[:, 1], 0.88)
    # 3 arm length: stretch outward from the collar
    dirs[:, 0, 3] = np.where(is_arm, 0.08 * (centers[:, 0] - 0.07 * side), 0.0)
    # 4 shoulder width
    upper = np.clip((verts[:, 1] - 1.15) / 0.3, 0.0, 1.0)
    dirs[:, 0, 4] = np.where(is_arm, 0.02 * side, 0.0) + np.where(is_torso, 0.12 * radial[:, 0] * upper, 0.0)
    # 5 hip width
    lower = np.clip((1.1 - verts[:, 1]) / 0.3, 0.0, 1.0)
    dirs[:, 0, 5] = np.where(is_leg, 0.012 * side, 0.0) + np.where(is_torso, 0.12 * radial[:, 0] * lower, 0.0)
    # 6 belly
    bump = np.exp(-((verts[:, 1] - 1.07) / 0.12) ** 2)
    dirs[:, 2, 6] = np.where(is_torso, 0.35 * np.maximum(radial[:, 2], 0.0) * bump, 0.0)
    # 7 head size
    head = kind == "head"
    dirs[:, :, 7] = np.where(head[:, None], 0.08 * (verts - REST_JOINTS[HEAD_JOINT]), 0.0)
    # 8 torso length: everything above the hips rides up proportionally
    dirs[:, 1, 8] = 0.06 * (np.clip(centers[:, 1], 0.88, 1.47) - 0.88)
    # 9 limb thickness
    dirs[:, :, 9] = np.where((is_arm | is_leg)[:, None], 0.12, 0.0) * radial
    dirs *= jitter[None, None, :]

    asset = BodyModelAsset(
        template_vertices=verts,
        shape_dirs=dirs,
        pose_dirs=np.zeros((V, 3, 9 * (NUM_JOINTS - 1))),
        joint_regressor=regressor,
        parents=SMPL_PARENTS.copy(),
        skin_weights=weights,
        faces=np.array(b.faces, dtype=np.int64),
        uv_coords=np.clip(np.array(b.uvs, dtype=np.float64), 0.0, 1.0),
        uv_regions={k: [tuple(map(float, r)) for r in v] for k, v in b.regions.items()},
    )
    validate_asset(asset)
    logger.debug("procedural humanoid: %d vertices, %d faces, parts=%s", V, len(b.faces), part_names)
    return asset


# ----------------------------------------------------------------------- IO

def save_model_asset(asset: BodyModelAsset, path) -> None:
    np.savez(
        path,
        template_vertices=asset.template_vertices, shape_dirs=asset.shape_dirs,
        pose_dirs=asset.pose_dirs, joint_regressor=asset.joint_regressor,
        parents=asset.parents, skin_weights=asset.skin_weights, faces=asset.faces,
        uv_coords=asset.uv_coords, uv_regions=json.dumps(asset.uv_regions),
    )


def _cylindrical_uv(verts: np.ndarray) -> np.ndarray:
    c = verts.mean(axis=0)
    u = (np.arctan2(verts[:, 0] - c[0], verts[:, 2] - c[2]) + np.pi) / (2 * np.pi)
    y = verts[:, 1]
    v = (y - y.min()) / max(y.max() - y.min(), 1e-12)
    return np.clip(np.stack([u, v], axis=1), 0.0, 1.0)


def load_model_asset(path) -> BodyModelAsset:
    """Load an asset from ``.npz``.

    Accepts both this package's field names and the SMPL distribution names
    (``v_template``, ``shapedirs``, ``posedirs``, ``J_regressor``,
    ``kintree_table``, ``weights``, ``f``). SMPL archives carry no per-vertex
    UVs, so a cylindrical projection is generated for them.
    """
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        keys = set(z.files)
        if "template_vertices" in keys:
            regions = json.loads(str(z["uv_regions"])) if "uv_regions" in keys else {}
            asset = BodyModelAsset(
                template_vertices=z["template_vertices"].astype(np.float64),
                shape_dirs=z["shape_dirs"].astype(np.float64),
                pose_dirs=z["pose_dirs"].astype(np.float64),
                joint_regressor=z["joint_regressor"].astype(np.float64),
                parents=z["parents"].astype(np.int64),
                skin_weights=z["skin_weights"].astype(np.float64),
                faces=z["faces"].astype(np.int64),
                uv_coords=z["uv_coords"].astype(np.float64),
                uv_regions={k: [tuple(r) for r in v] for k, v in regions.items()},
            )
        elif "v_template" in keys:
            verts = z["v_template"].astype(np.float64)
            parents = z["kintree_table"][0].astype(np.int64)
            parents[0] = -1
            shapedirs = z["shapedirs"].astype(np.float64)[:, :, :NUM_BETAS]
            Jreg = z["J_regressor"]
            Jreg = Jreg.toarray() if hasattr(Jreg, "toarray") else np.asarray(Jreg, dtype=np.float64)
            asset = BodyModelAsset(
                template_vertices=verts, shape_dirs=shapedirs,
                pose_dirs=z["posedirs"].astype(np.float64),
                joint_regressor=Jreg, parents=parents,
                skin_weights=z["weights"].astype(np.float64),
                faces=z["f"].astype(np.int64),
                uv_coords=z["uv_coords"].astype(np.float64) if "uv_coords" in keys else _cylindrical_uv(verts),
            )
        else:
            raise AssetValidationError(f"{path}: unrecognised asset archive (keys {sorted(keys)})")
    validate_asset(asset)
    return asset


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def export_mesh(mesh: MeshAsset, path, *, skeleton_path=None, texture_file: str | None = None) -> dict:
    """Write ``mesh`` as Wavefront OBJ plus a skeleton sidecar.

    When ``texture_file`` is given a minimal MTL referencing it is written
    next to the OBJ. Returns the written paths keyed by kind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    skeleton_path = Path(skeleton_path) if skeleton_path else path.with_name("skeleton.txt")
    out = {"obj": path, "skeleton": skeleton_path}
    lines = []
    if texture_file is not None:
        mtl_path = path.with_suffix(".mtl")
        mtl_path.write_text(
            "newmtl body\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\n"
            f"map_Kd {texture_file}\n", newline="\n",
        )
        out["mtl"] = mtl_path
        lines.append(f"mtllib {mtl_path.name}")
    for v in mesh.vertices:
        lines.append(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    for uv in mesh.uv_coords:
        lines.append(f"vt {_fmt(uv[0])} {_fmt(uv[1])}")
    if texture_file is not None:
        lines.append("usemtl body")
    for f in np.asarray(mesh.faces) + 1:
        lines.append(f"f {f[0]}/{f[0]} {f[1]}/{f[1]} {f[2]}/{f[2]}")
    path.write_text("\n".join(lines) + "\n", newline="\n")

    sidecar = {
        "format_version": SKELETON_FORMAT_VERSION,
        "joint_names": list(JOINT_NAMES[: len(mesh.skeleton)]),
        "parents": [int(p) for p in mesh.skeleton],
        "rest_joints": None if mesh.rest_joints is None else np.round(mesh.rest_joints, 9).tolist(),
        "posed_joints": np.round(mesh.joints3d, 9).tolist(),
        "skin_weights": np.round(mesh.skin_weights, 9).tolist(),
    }
    skeleton_path.write_text(json.dumps(sidecar) + "\n", newline="\n")
    return out


def load_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse the OBJ subset written by ``export_mesh`` (v, vt, triangular f)."""
    verts, uvs, faces = [], [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tag, *rest = line.split()
            try:
                if tag == "v":
                    if len(rest) < 3:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(x) for x in rest[:3]])
                elif tag == "vt":
                    if len(rest) < 2:
                        raise ValueError("texture coordinate needs 2 values")
                    uvs.append([float(x) for x in rest[:2]])
                elif tag == "f":
                    if len(rest) != 3:
                        raise ValueError("only triangular faces are supported")
                    faces.append([int(tok.split("/")[0]) - 1 for tok in rest])
                elif tag in ("mtllib", "usemtl", "o", "g", "s", "vn"):
                    continue
                else:
                    raise ValueError(f"unknown record '{tag}'")
            except ValueError as exc:
                raise ObjParseError(path, lineno, str(exc)) from None
    faces_arr = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if faces_arr.size and (faces_arr.min() < 0 or faces_arr.max() >= len(verts)):
        raise ObjParseError(path, 0, "face references a missing vertex")
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(uvs, dtype=np.float64).reshape(-1, 2), faces_arr


def load_skeleton(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("format_version") != SKELETON_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported skeleton format_version {data.get('format_version')}")
    return data
