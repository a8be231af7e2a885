"""In-memory frames for the demos, so they don't need a dataset on disk."""
import numpy as np

from egobody.dataset import FrameRecord, RigConfig, make_procedural_texture, render_frame, sample_pose_sequence


def make_frames(asset, n, res=64, seed=100, styles=("walk", "box", "dance", "jump")):
    cams = RigConfig().cameras(res)
    frames = []
    for i in range(n):
        p = sample_pose_sequence(seed + i, 1, styles[i % len(styles)])[0]
        tex = make_procedural_texture(seed + i, 64, asset.uv_regions)
        imgs, meta = render_frame(asset, p, tex, cams)
        frames.append(FrameRecord(imgs["ego_front"], imgs["ego_back"], imgs["tp_front"], imgs["tp_back"], tex, p,
                                  np.asarray(meta["joints3d"]), np.asarray(meta["joints2d_tp_front"]),
                                  np.asarray(meta["visibility_tp_front"], dtype=bool), i, i, meta))
    return frames
