"""Compare the three target arrangements at a small fixed training budget.

Trains one translation model per layout (stacked, side by side, side by side
rotated) and prints the RMSE/SSIM table next to the reference numbers. With a
budget this small the ranking is noisy; run a few seeds before reading much
into it.
"""
import argparse

import torch

from egobody.dataset import default_asset
from egobody.evaluation import format_arrangement_table, run_arrangement_experiment

from tiny_frames import make_frames


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--train", type=int, default=16)
    ap.add_argument("--test", type=int, default=4)
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--seed", type=int, default=300)
    args = ap.parse_args()
    torch.set_num_threads(1)
    torch.manual_seed(args.seed)

    frames = make_frames(default_asset(), args.train + args.test, seed=args.seed)
    rows = run_arrangement_experiment(frames[:args.train], frames[args.train:], args.steps,
                                      gen_kw=dict(depth=4, base_channels=16), train_kw=dict(lr_g=1e-3, lr_d=1e-3),
                                      dropout=False)
    print(format_arrangement_table(rows))


if __name__ == "__main__":
    main()
