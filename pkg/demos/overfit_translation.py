"""Memorise a single egocentric -> third-person pair and save a comparison strip.

Renders one synthetic frame, trains the translation cGAN on it for a few hundred
steps and writes input, target and output side by side.

    python3 demos/overfit_translation.py --steps 200 --out demo_out
"""
import argparse
from pathlib import Path

import numpy as np
import torch

from egobody.dataset import (
    ArrangedPair, RigConfig, default_asset, make_procedural_texture, render_frame, sample_pose_sequence,
    unarrange_target,
)
from egobody.evaluation import ssim
from egobody.renderer import save_png
from egobody.translation import DiscriminatorConfig, GANTrainer, GeneratorConfig, TrainConfig, fit, translate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--res", type=int, default=64)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()
    torch.set_num_threads(1)
    torch.manual_seed(0)

    asset = default_asset()
    pose = sample_pose_sequence(1, 30, "walk")[20]
    tex = make_procedural_texture(3, 64, asset.uv_regions)
    imgs, _ = render_frame(asset, pose, tex, RigConfig().cameras(args.res))
    pair = ArrangedPair.from_views(imgs["ego_front"], imgs["ego_back"], imgs["tp_front"], imgs["tp_back"], "C")

    trainer = GANTrainer(GeneratorConfig(in_shape=pair.input.shape[:2], depth=4, dropout_rate=0.25),
                         DiscriminatorConfig(), TrainConfig(lr_g=2e-3, lr_d=2e-3))
    history = fit(trainer, pair.input[None], pair.target[None], steps=args.steps)
    out = translate(trainer.G, pair.input, dropout=False)
    print(f"final losses {history[-1]}")
    print(f"L1 {np.abs(out.astype(float) - pair.target).mean() / 127.5:.4f}  SSIM {ssim(out, pair.target):.3f}")

    # columns: egocentric input, ground truth, generated; rows: front, back
    gen_front, gen_back = unarrange_target(out, "C")
    strip = np.concatenate([pair.input,
                            np.concatenate([imgs["tp_front"], imgs["tp_back"]]),
                            np.concatenate([gen_front, gen_back])], axis=1)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    save_png(dest / "overfit_translation.png", np.ascontiguousarray(strip))
    print(f"wrote {dest / 'overfit_translation.png'}")


if __name__ == "__main__":
    main()
