"""Synthetic paired egocentric / third-person dataset.

Each sequence gets its own body shape, clothing texture and procedural motion
clip; every frame is rendered from the four rig cameras. Layout on disk::

    root/manifest.json
    root/seq_0000/frame_00000_{ego_front,ego_back,tp_front,tp_back,texture}.png
    root/seq_0000/frame_00000_meta.json
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .body_model import (
    NUM_BETAS, NUM_JOINTS, BodyModelAsset, BodyParams, forward, load_model_asset,
    make_procedural_humanoid, rodrigues, rotation_to_axis_angle,
)
from .camera_rig import (
    CameraSpec, camera_relative_root, camera_world_pose, fit_weak_perspective,
    pixels_to_normalized, rig_default, world_to_camera,
)
from .renderer import DEFAULT_BG, rasterize, render_joints2d, load_png, save_png

logger = logging.getLogger(__name__)

META_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1
VIEWS = ("ego_front", "ego_back", "tp_front", "tp_back")
STYLES = ("walk", "box", "jump", "dance", "idle")
METHODS = ("A", "B", "C")

# Per-joint limits on the axis-angle components (x, y, z), radians. Signs
# follow the rest pose: the body faces +z, the left side is +x, arms are
# horizontal. Knees hinge about x (0..2.4), elbows about y (0..2.6 in
# magnitude, sign mirrored between sides).
JOINT_LIMITS = {
    1: ((-1.8, -0.5, -0.2), (0.5, 0.5, 0.8)),      # left hip
    2: ((-1.8, -0.5, -0.8), (0.5, 0.5, 0.2)),      # right hip
    3: ((-0.3, -0.4, -0.3), (0.5, 0.4, 0.3)),      # spine1
    4: ((0.0, 0.0, 0.0), (2.4, 0.0, 0.0)),         # left knee
    5: ((0.0, 0.0, 0.0), (2.4, 0.0, 0.0)),         # right knee
    6: ((-0.25, -0.3, -0.25), (0.4, 0.3, 0.25)),   # spine2
    7: ((-0.5, -0.2, -0.2), (0.6, 0.2, 0.2)),      # left ankle
    8: ((-0.5, -0.2, -0.2), (0.6, 0.2, 0.2)),
    9: ((-0.25, -0.3, -0.25), (0.4, 0.3, 0.25)),   # spine3
    10: ((-0.3, 0.0, 0.0), (0.3, 0.0, 0.0)),       # left toes
    11: ((-0.3, 0.0, 0.0), (0.3, 0.0, 0.0)),
    12: ((-0.4, -0.6, -0.3), (0.5, 0.6, 0.3)),     # neck
    13: ((-0.2, -0.3, -0.3), (0.2, 0.3, 0.3)),     # left collar
    14: ((-0.2, -0.3, -0.3), (0.2, 0.3, 0.3)),
    15: ((-0.3, -0.5, -0.3), (0.4, 0.5, 0.3)),     # head
    16: ((-0.8, -1.4, -1.5), (0.8, 0.6, 0.6)),     # left shoulder
    17: ((-0.8, -0.6, -0.6), (0.8, 1.4, 1.5)),     # right shoulder
    18: ((0.0, -2.6, 0.0), (0.0, 0.0, 0.0)),       # left elbow
    19: ((0.0, 0.0, 0.0), (0.0, 2.6, 0.0)),        # right elbow
    20: ((-0.5, -0.3, -0.8), (0.5, 0.3, 0.8)),     # left wrist
    21: ((-0.5, -0.3, -0.8), (0.5, 0.3, 0.8)),
    22: ((-0.2, -0.2, -0.2), (0.2, 0.2, 0.2)),     # left hand
    23: ((-0.2, -0.2, -0.2), (0.2, 0.2, 0.2)),
}

_GROUPS = {
    "legs": (1, 2, 4, 5, 7, 8, 10, 11),
    "spine": (3, 6, 9, 12, 15),
    "arms": (13, 14, 16, 17, 18, 19, 20, 21, 22, 23),
}
# arms relaxed at the sides; boxers keep elbows bent and fists up
_REST_BIAS = {16: (0.0, 0.0, -1.2), 17: (0.0, 0.0, 1.2)}
_GUARD_BIAS = {16: (0.0, -0.9, -0.9), 17: (0.0, 0.9, 0.9), 18: (0.0, -2.0, 0.0), 19: (0.0, 2.0, 0.0)}

# style -> (activity per group, pose bias, root (yaw, pitch, roll) amplitude, keyframe spacing)
STYLE_PRESETS = {
    "idle": ({"legs": 0.1, "spine": 0.2, "arms": 0.15}, _REST_BIAS, (0.3, 0.05, 0.05), 14),
    "walk": ({"legs": 0.45, "spine": 0.15, "arms": 0.3}, _REST_BIAS, (1.0, 0.08, 0.05), 10),
    "box": ({"legs": 0.2, "spine": 0.35, "arms": 0.6}, _GUARD_BIAS, (0.6, 0.1, 0.1), 10),
    "jump": ({"legs": 0.7, "spine": 0.3, "arms": 0.6}, _REST_BIAS, (0.4, 0.3, 0.1), 12),
    "dance": ({"legs": 0.5, "spine": 0.5, "arms": 0.7}, _REST_BIAS, (2.0, 0.15, 0.15), 12),
}
MAX_STEP_RAD = 0.12


def _limits_arrays():
    lo = np.zeros((NUM_JOINTS, 3))
    hi = np.zeros((NUM_JOINTS, 3))
    for j, (l, h) in JOINT_LIMITS.items():
        lo[j], hi[j] = l, h
    return lo, hi


def _sample_keyframe(rng, style: str) -> np.ndarray:
    activity, bias, root_amp, _ = STYLE_PRESETS[style]
    lo, hi = _limits_arrays()
    pose = np.zeros((NUM_JOINTS, 3))
    for j, b in bias.items():
        pose[j] = b
    pose = np.clip(pose, lo, hi)
    u = rng.uniform(lo, hi)
    act = np.zeros(NUM_JOINTS)
    for g, joints in _GROUPS.items():
        act[list(joints)] = activity[g]
    kf = np.clip(pose + act[:, None] * (u - pose), lo, hi)
    kf[0] = 0.0
    return kf, np.array(root_amp)


def _slerp(R0: np.ndarray, R1: np.ndarray, t: float) -> np.ndarray:
    return R0 @ rodrigues(t * rotation_to_axis_angle(R0.T @ R1))


def _geodesic(R0: np.ndarray, R1: np.ndarray) -> float:
    return float(np.linalg.norm(rotation_to_axis_angle(R0.T @ R1)))


def sample_pose_sequence(seed: int, n_frames: int, style: str = "walk") -> list[BodyParams]:
    """Smooth procedural motion clip.

    Keyframes are drawn inside ``JOINT_LIMITS`` (biased by the style preset)
    and joined by per-joint slerp. Keyframe gaps are widened when needed so
    no joint turns more than ``MAX_STEP_RAD`` between consecutive frames.
    The shape vector is drawn once per clip from a clipped standard normal.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if style not in STYLE_PRESETS:
        raise ValueError(f"unknown style {style!r}; choose from {sorted(STYLE_PRESETS)}")
    rng = np.random.default_rng(seed)
    beta = np.clip(rng.standard_normal(NUM_BETAS), -2.5, 2.5)
    spacing = STYLE_PRESETS[style][3]
    heading = rng.uniform(-np.pi, np.pi)

    def keyframe():
        kf, amp = _sample_keyframe(rng, style)
        yaw = heading + rng.uniform(-amp[0], amp[0])
        pitch = rng.uniform(-amp[1], amp[1])
        roll = rng.uniform(-amp[2], amp[2])
        R_root = rodrigues([0, yaw, 0]) @ rodrigues([pitch, 0, 0]) @ rodrigues([0, 0, roll])
        rots = [R_root] + [rodrigues(kf[j]) for j in range(1, NUM_JOINTS)]
        return np.stack(rots)

    frames: list[np.ndarray] = []
    current = keyframe()
    frames.append(current)
    while len(frames) < n_frames:
        nxt = keyframe()
        widest = max(_geodesic(current[j], nxt[j]) for j in range(NUM_JOINTS))
        gap = max(spacing, int(np.ceil(widest / MAX_STEP_RAD)))
        for i in range(1, gap + 1):
            t = i / gap
            frames.append(np.stack([_slerp(current[j], nxt[j], t) for j in range(NUM_JOINTS)]))
            if len(frames) == n_frames:
                break
        current = nxt
    out = []
    for rots in frames:
        theta = np.concatenate([rotation_to_axis_angle(R) for R in rots])
        out.append(BodyParams(beta, theta))
    return out


# ----------------------------------------------------------------- textures

SKIN_TONES = [(241, 194, 167), (224, 172, 105), (198, 134, 66), (141, 85, 36), (255, 219, 172), (110, 70, 45)]
SHIRT_COLORS = [(200, 30, 40), (30, 90, 200), (40, 160, 70), (240, 200, 40), (250, 250, 250), (30, 30, 30),
                (150, 50, 170), (250, 130, 20), (20, 170, 180), (120, 120, 120), (240, 110, 160), (90, 60, 30)]
PANTS_COLORS = [(30, 40, 90), (20, 20, 20), (110, 90, 60), (70, 70, 75), (40, 80, 50), (150, 140, 120),
                (60, 100, 160), (100, 30, 30)]
SHOE_COLORS = [(20, 20, 20), (240, 240, 240), (120, 70, 30), (200, 40, 40), (50, 50, 120)]
ATLAS_FILL = (128, 128, 128)


@lru_cache(maxsize=4)
def default_asset(seed: int = 0) -> BodyModelAsset:
    return make_procedural_humanoid(seed)


def region_texel_slices(rect, size: int) -> tuple[slice, slice]:
    u0, v0, u1, v1 = rect
    c0, c1 = int(np.floor(u0 * size)), int(np.ceil(u1 * size))
    r0, r1 = int(np.floor((1 - v1) * size)), int(np.ceil((1 - v0) * size))
    return slice(max(r0, 0), min(r1, size)), slice(max(c0, 0), min(c1, size))


def region_mask(uv_regions: dict, region: str, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    for rect in uv_regions.get(region, []):
        rs, cs = region_texel_slices(rect, size)
        mask[rs, cs] = True
    return mask


def make_procedural_texture(seed: int, size: int = 256, uv_regions: dict | None = None) -> np.ndarray:
    """Clothing texture: skin, shirt, pants and shoe regions of the UV atlas
    painted from fixed palettes; half of the shirts get stripes or blocks."""
    if size & (size - 1):
        raise ValueError("texture size must be a power of two")
    regions = default_asset().uv_regions if uv_regions is None else uv_regions
    rng = np.random.default_rng(seed)
    skin = SKIN_TONES[rng.integers(len(SKIN_TONES))]
    shirt = SHIRT_COLORS[rng.integers(len(SHIRT_COLORS))]
    pants = PANTS_COLORS[rng.integers(len(PANTS_COLORS))]
    shoes = SHOE_COLORS[rng.integers(len(SHOE_COLORS))]
    patterned = rng.random() < 0.5
    pattern = rng.choice(["stripes", "blocks"])
    accent = SHIRT_COLORS[rng.integers(len(SHIRT_COLORS))]
    period = int(rng.integers(3, 7))

    tex = np.empty((size, size, 3), dtype=np.uint8)
    tex[:] = ATLAS_FILL
    for name, color in (("skin", skin), ("pants", pants), ("shoes", shoes), ("shirt", shirt)):
        tex[region_mask(regions, name, size)] = color
    if patterned:
        rows, cols = np.indices((size, size))
        # pattern period in texels, scaled with the texture size
        p = max(1, period * size // 128)
        if pattern == "stripes":
            on = (rows // p) % 2 == 0
        else:
            on = ((rows // (2 * p)) + (cols // (2 * p))) % 2 == 0
        sel = region_mask(regions, "shirt", size) & on
        tex[sel] = accent
    return tex


# ------------------------------------------------------------- arrangement

def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"front/back views differ in size: {a.shape} vs {b.shape}")


def stack_ego(ego_front: np.ndarray, ego_back: np.ndarray) -> np.ndarray:
    """The generator input: front view stacked above the back view."""
    _check_pair(ego_front, ego_back)
    return np.concatenate([ego_front, ego_back], axis=0)


def unstack_ego(stacked: np.ndarray):
    h = stacked.shape[0] // 2
    return stacked[:h], stacked[h:]


def arrange_target(tp_front: np.ndarray, tp_back: np.ndarray, method: str) -> np.ndarray:
    """Compose the two third-person views into one training target.

    A: front above back, each at native scale, row-aligned with the stacked
       egocentric input.
    B: front and back side by side.
    C: B rotated 90 degrees clockwise, so each view lines up with its
       egocentric counterpart.
    """
    _check_pair(tp_front, tp_back)
    if method == "A":
        return np.concatenate([tp_front, tp_back], axis=0)
    if method == "B":
        return np.concatenate([tp_front, tp_back], axis=1)
    if method == "C":
        return np.ascontiguousarray(np.rot90(np.concatenate([tp_front, tp_back], axis=1), k=-1))
    raise ValueError(f"unknown arrangement method {method!r}")


def unarrange_target(arranged: np.ndarray, method: str):
    if method == "A":
        h = arranged.shape[0] // 2
        return arranged[:h], arranged[h:]
    if method == "B":
        w = arranged.shape[1] // 2
        return arranged[:, :w], arranged[:, w:]
    if method == "C":
        side = np.rot90(arranged, k=1)
        w = side.shape[1] // 2
        return np.ascontiguousarray(side[:, :w]), np.ascontiguousarray(side[:, w:])
    raise ValueError(f"unknown arrangement method {method!r}")


def arranged_shape(view_hw: tuple[int, int], method: str) -> tuple[int, int]:
    h, w = view_hw
    if method == "A":
        return 2 * h, w
    if method == "B":
        return h, 2 * w
    if method == "C":
        return 2 * w, h
    raise ValueError(f"unknown arrangement method {method!r}")


@dataclass
class ArrangedPair:
    input: np.ndarray
    target: np.ndarray
    method: str

    @classmethod
    def from_views(cls, ego_front, ego_back, tp_front, tp_back, method: str) -> "ArrangedPair":
        return cls(stack_ego(ego_front, ego_back), arrange_target(tp_front, tp_back, method), method)


# -------------------------------------------------------------- rendering

@dataclass(frozen=True)
class RigConfig:
    ego_fov_deg: float = 110.0
    tp_fov_deg: float = 48.0
    tp_distance: float = 2.5
    tp_height: float = 0.3

    def cameras(self, resolution: int) -> list[CameraSpec]:
        return rig_default((resolution, resolution), self.ego_fov_deg, self.tp_fov_deg,
                           self.tp_distance, self.tp_height)


@dataclass
class FrameRecord:
    ego_front: np.ndarray
    ego_back: np.ndarray
    tp_front: np.ndarray
    tp_back: np.ndarray
    texture: np.ndarray
    params: BodyParams
    joints3d: np.ndarray
    joints2d_tp_front: np.ndarray
    visibility_tp_front: np.ndarray
    frame_id: int
    sequence_id: int
    meta: dict = field(default_factory=dict)

    def arranged(self, method: str) -> ArrangedPair:
        return ArrangedPair.from_views(self.ego_front, self.ego_back, self.tp_front, self.tp_back, method)


def recovery_targets(mesh, spec: CameraSpec, extrinsic: np.ndarray, params: BodyParams,
                     joints2d_px: np.ndarray, visibility: np.ndarray) -> dict:
    """Supervision for mesh recovery: camera-relative pose, normalised 2D
    joints and the weak-perspective camera that best explains them."""
    theta_view = camera_relative_root(params.theta, extrinsic)
    j_cam = world_to_camera(mesh.joints3d, extrinsic)
    j2d = pixels_to_normalized(joints2d_px, spec.resolution)
    # view-relative joints differ from camera-frame joints by a translation
    cam = fit_weak_perspective(j_cam - j_cam[0], j2d)
    return {
        "theta_view": theta_view.tolist(),
        "cam": {"s": cam.s, "t": cam.t.tolist()},
        "joints2d_norm": j2d.tolist(),
        "visibility": visibility.astype(int).tolist(),
    }


def render_frame(asset: BodyModelAsset, params: BodyParams, texture: np.ndarray,
                 cameras: list[CameraSpec], bg_color=DEFAULT_BG) -> tuple[dict, dict]:
    mesh = forward(asset, params)
    images, meta = {}, {"cameras": {}}
    for spec in cameras:
        ext = camera_world_pose(spec, mesh.joint_transforms)
        img, depth = rasterize(mesh, texture, spec, ext, bg_color, return_depth=True)
        images[spec.name] = img
        meta["cameras"][spec.name] = ext.tolist()
        if spec.name == "tp_front":
            px, vis = render_joints2d(mesh, spec, ext, depth)
            meta["joints2d_tp_front"] = px.tolist()
            meta["visibility_tp_front"] = vis.astype(int).tolist()
            meta["recovery"] = recovery_targets(mesh, spec, ext, params, px, vis)
    meta["params"] = params.to_dict()
    meta["joints3d"] = mesh.joints3d.tolist()
    return images, meta


# ---------------------------------------------------------- generation

@dataclass
class DatasetConfig:
    root: str = "data/synthetic"
    sequences: int = 40
    frames: int = 50
    resolution: int = 128
    texture_size: int = 256
    styles: tuple = STYLES
    bg_color: tuple = DEFAULT_BG
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    asset_path: str | None = None
    asset_seed: int = 0
    workers: int = 1
    rig: RigConfig = field(default_factory=RigConfig)

    def content_dict(self) -> dict:
        """Everything that affects the generated bytes (the root does not)."""
        d = asdict(self)
        d.pop("root")
        d.pop("workers")
        d["styles"] = list(self.styles)
        d["bg_color"] = list(self.bg_color)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.content_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class DatasetManifest:
    root: Path
    frame_count: int
    sequence_count: int
    seed: int
    config_hash: str
    frames: list
    path: Path | None = None

    def split(self, name: str) -> list[dict]:
        return [f for f in self.frames if f["split"] == name]

    def file_hash(self) -> str:
        return hashlib.sha256(self.path.read_bytes()).hexdigest()


def frame_seed(master_seed: int, sequence_id: int, frame_id: int = -1) -> int:
    ss = np.random.SeedSequence([master_seed, sequence_id + 1, frame_id + 1])
    return int(ss.generate_state(1)[0])


def assign_splits(n_sequences: int, val_fraction: float, test_fraction: float, seed: int) -> list[str]:
    n_test = int(round(test_fraction * n_sequences))
    n_val = int(round(val_fraction * n_sequences))
    if n_sequences >= 2 and test_fraction > 0:
        n_test = max(n_test, 1)
    if n_sequences >= 3 and val_fraction > 0:
        n_val = max(n_val, 1)
    n_val = min(n_val, max(n_sequences - n_test - 1, 0))
    order = np.random.default_rng(frame_seed(seed, -1)).permutation(n_sequences)
    splits = ["train"] * n_sequences
    for i in order[:n_test]:
        splits[i] = "test"
    for i in order[n_test:n_test + n_val]:
        splits[i] = "val"
    return splits


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_asset(config: DatasetConfig) -> BodyModelAsset:
    if config.asset_path:
        return load_model_asset(config.asset_path)
    return default_asset(config.asset_seed)


def _generate_sequence(config: DatasetConfig, seed: int, seq_id: int) -> list[dict]:
    asset = _load_asset(config)
    cameras = config.rig.cameras(config.resolution)
    seq_seed = frame_seed(seed, seq_id)
    rng = np.random.default_rng(seq_seed)
    style = config.styles[int(rng.integers(len(config.styles)))]
    poses = sample_pose_sequence(int(rng.integers(2**31)), config.frames, style)
    texture = make_procedural_texture(int(rng.integers(2**31)), config.texture_size, asset.uv_regions)
    root = Path(config.root)
    seq_dir = root / f"seq_{seq_id:04d}"
    seq_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for frame_id, params in enumerate(poses):
        images, meta = render_frame(asset, params, texture, cameras, config.bg_color)
        images["texture"] = texture
        stem = f"frame_{frame_id:05d}"
        files = {}
        for name, img in images.items():
            p = seq_dir / f"{stem}_{name}.png"
            save_png(p, img)
            files[name] = str(p.relative_to(root))
        meta.update(format_version=META_FORMAT_VERSION, sequence_id=seq_id, frame_id=frame_id, style=style)
        mp = seq_dir / f"{stem}_meta.json"
        mp.write_text(json.dumps(meta, sort_keys=True) + "\n")
        files["meta"] = str(mp.relative_to(root))
        entries.append({
            "sequence_id": seq_id, "frame_id": frame_id, "style": style, "files": files,
            "sha256": {k: _sha(root / v) for k, v in files.items()},
        })
    return entries


def generate_dataset(config: DatasetConfig, seed: int = 0) -> DatasetManifest:
    """Render ``config.sequences`` x ``config.frames`` frames under ``config.root``.

    Output is bit-identical for the same (config, seed). If generation fails,
    directories created by this call are removed before re-raising.
    """
    root = Path(config.root)
    root.mkdir(parents=True, exist_ok=True)
    created = [root / f"seq_{i:04d}" for i in range(config.sequences)
               if not (root / f"seq_{i:04d}").exists()]
    try:
        if config.workers > 1:
            with ProcessPoolExecutor(max_workers=config.workers) as ex:
                results = list(ex.map(_generate_sequence, [config] * config.sequences,
                                      [seed] * config.sequences, range(config.sequences)))
        else:
            results = [_generate_sequence(config, seed, i) for i in range(config.sequences)]
        splits = assign_splits(config.sequences, config.val_fraction, config.test_fraction, seed)
        frames = []
        for seq_id, entries in enumerate(results):
            for e in entries:
                e["split"] = splits[seq_id]
                frames.append(e)
        manifest = {
            "format_version": MANIFEST_FORMAT_VERSION,
            "root": ".",
            "frame_count": len(frames),
            "sequence_count": config.sequences,
            "seed": seed,
            "config_hash": config.hash(),
            "config": config.content_dict(),
            "frames": frames,
        }
        path = root / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except BaseException:
        for d in created:
            shutil.rmtree(d, ignore_errors=True)
        raise
    logger.info("generated %d frames in %s", len(frames), root)
    return load_manifest(path)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    data = json.loads(path.read_text())
    if data.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported manifest format_version")
    root = path.parent
    for f in data["frames"]:
        for rel in f["files"].values():
            if not (root / rel).exists():
                raise FileNotFoundError(f"manifest lists missing file {root / rel}")
    return DatasetManifest(root=root, frame_count=data["frame_count"], sequence_count=data["sequence_count"],
                           seed=data["seed"], config_hash=data["config_hash"], frames=data["frames"], path=path)


def load_frame(manifest: DatasetManifest, entry: dict) -> FrameRecord:
    root = manifest.root
    files = entry["files"]
    meta = json.loads((root / files["meta"]).read_text())
    imgs = {k: load_png(root / files[k]) for k in (*VIEWS, "texture")}
    return FrameRecord(
        **imgs,
        params=BodyParams.from_dict(meta["params"]),
        joints3d=np.asarray(meta["joints3d"]),
        joints2d_tp_front=np.asarray(meta["joints2d_tp_front"]),
        visibility_tp_front=np.asarray(meta["visibility_tp_front"], dtype=bool),
        frame_id=meta["frame_id"], sequence_id=meta["sequence_id"], meta=meta,
    )


def load_split(manifest: DatasetManifest, split: str) -> list[FrameRecord]:
    return [load_frame(manifest, e) for e in manifest.split(split)]
