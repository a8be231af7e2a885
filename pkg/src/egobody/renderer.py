"""Deterministic software rasterizer: z-buffered, perspective-correct UV
interpolation, unlit texture-only shading over a solid background."""
from __future__ import annotations

from pathlib import Path

import numba
import numpy as np
from PIL import Image as PILImage

from .body_model import MeshAsset
from .camera_rig import CameraSpec, project_pinhole

NEAR = 1e-3
DEFAULT_BG = (128, 128, 128)


def check_texture(texture: np.ndarray) -> np.ndarray:
    texture = np.asarray(texture)
    if texture.ndim != 3 or texture.shape[2] != 3 or texture.shape[0] != texture.shape[1]:
        raise ValueError(f"texture must be square TxTx3, got {texture.shape}")
    T = texture.shape[0]
    if T & (T - 1):
        raise ValueError(f"texture size must be a power of two, got {T}")
    if texture.dtype != np.uint8:
        raise ValueError("texture must be uint8")
    return texture


@numba.njit(cache=True)
def _sample(texture, u, v, bilinear):
    T = texture.shape[0]
    out = np.empty(3, dtype=np.uint8)
    if not bilinear:
        col = min(max(int(np.floor(u * T)), 0), T - 1)
        row = min(max(int(np.floor((1.0 - v) * T)), 0), T - 1)
        for c in range(3):
            out[c] = texture[row, col, c]
        return out
    x = u * T - 0.5
    y = (1.0 - v) * T - 0.5
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    fx = x - x0
    fy = y - y0
    x0c = min(max(x0, 0), T - 1)
    x1c = min(max(x0 + 1, 0), T - 1)
    y0c = min(max(y0, 0), T - 1)
    y1c = min(max(y0 + 1, 0), T - 1)
    for c in range(3):
        val = ((1 - fx) * (1 - fy) * texture[y0c, x0c, c] + fx * (1 - fy) * texture[y0c, x1c, c]
               + (1 - fx) * fy * texture[y1c, x0c, c] + fx * fy * texture[y1c, x1c, c])
        out[c] = min(max(int(np.floor(val + 0.5)), 0), 255)
    return out


@numba.njit(cache=True)
def _raster_kernel(px, depth, uv, faces, texture, img, zbuf, bilinear, near):
    H, W = zbuf.shape
    for fi in range(faces.shape[0]):
        a, b, c = faces[fi, 0], faces[fi, 1], faces[fi, 2]
        za, zb, zc = depth[a], depth[b], depth[c]
        if za <= near or zb <= near or zc <= near:
            continue
        ax, ay = px[a, 0], px[a, 1]
        bx, by = px[b, 0], px[b, 1]
        cx, cy = px[c, 0], px[c, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(np.floor(min(ax, bx, cx))), 0)
        xmax = min(int(np.ceil(max(ax, bx, cx))), W - 1)
        ymin = max(int(np.floor(min(ay, by, cy))), 0)
        ymax = min(int(np.ceil(max(ay, by, cy))), H - 1)
        inv_area = 1.0 / area
        for y in range(ymin, ymax + 1):
            sy = y + 0.5
            for x in range(xmin, xmax + 1):
                sx = x + 0.5
                l0 = ((bx - sx) * (cy - sy) - (by - sy) * (cx - sx)) * inv_area
                l1 = ((cx - sx) * (ay - sy) - (cy - sy) * (ax - sx)) * inv_area
                l2 = 1.0 - l0 - l1
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                w0, w1, w2 = l0 / za, l1 / zb, l2 / zc
                wsum = w0 + w1 + w2
                z = 1.0 / wsum
                if z >= zbuf[y, x]:
                    continue
                zbuf[y, x] = z
                u = (w0 * uv[a, 0] + w1 * uv[b, 0] + w2 * uv[c, 0]) * z
                v = (w0 * uv[a, 1] + w1 * uv[b, 1] + w2 * uv[c, 1]) * z
                col = _sample(texture, u, v, bilinear)
                img[y, x, 0] = col[0]
                img[y, x, 1] = col[1]
                img[y, x, 2] = col[2]


def rasterize(mesh: MeshAsset, texture: np.ndarray, spec: CameraSpec, extrinsic: np.ndarray,
              bg_color=DEFAULT_BG, *, bilinear: bool = False, return_depth: bool = False):
    """Render ``mesh`` through camera ``spec`` posed at ``extrinsic``.

    Returns an HxWx3 uint8 image, plus the depth buffer (inf where empty)
    when ``return_depth`` is set.
    """
    texture = check_texture(texture)
    W, H = spec.resolution
    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = np.asarray(bg_color, dtype=np.uint8)
    zbuf = np.full((H, W), np.inf)
    if len(mesh.faces):
        px, depth = project_pinhole(mesh.vertices, extrinsic, spec.fov_deg, spec.resolution)
        _raster_kernel(
            np.ascontiguousarray(px), np.ascontiguousarray(depth),
            np.ascontiguousarray(mesh.uv_coords, dtype=np.float64),
            np.ascontiguousarray(mesh.faces, dtype=np.int64),
            np.ascontiguousarray(texture), img, zbuf, bilinear, NEAR,
        )
    if return_depth:
        return img, zbuf
    return img


def render_depth(mesh: MeshAsset, spec: CameraSpec, extrinsic: np.ndarray) -> np.ndarray:
    dummy = np.zeros((1, 1, 3), dtype=np.uint8)
    return rasterize(mesh, dummy, spec, extrinsic, return_depth=True)[1]


def render_joints2d(mesh: MeshAsset, spec: CameraSpec, extrinsic: np.ndarray,
                    depth_buffer: np.ndarray | None = None, tolerance: float = 0.05):
    """Pixel positions of ``mesh.joints3d`` and a per-joint visibility flag.

    Joints sit inside the body, so the z-buffer is compared against the depth
    of the joint's own surface shell (joint depth minus its radius) with
    ``tolerance`` metres of slack.
    """
    px, depth = project_pinhole(mesh.joints3d, extrinsic, spec.fov_deg, spec.resolution)
    if depth_buffer is None:
        depth_buffer = render_depth(mesh, spec, extrinsic)
    W, H = spec.resolution
    radii = np.zeros(len(px)) if mesh.joint_radii is None else mesh.joint_radii
    vis = np.zeros(len(px), dtype=bool)
    for j in range(len(px)):
        if depth[j] <= NEAR:
            continue
        x, y = int(np.floor(px[j, 0])), int(np.floor(px[j, 1]))
        if not (0 <= x < W and 0 <= y < H):
            continue
        vis[j] = depth_buffer[y, x] >= depth[j] - radii[j] - tolerance
    return px, vis


def foreground_mask(img: np.ndarray, bg_color=DEFAULT_BG) -> np.ndarray:
    return np.any(np.asarray(img) != np.asarray(bg_color, dtype=np.uint8), axis=-1)


def save_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PNG output must be HxWx3 uint8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(img, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
