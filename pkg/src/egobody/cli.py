"""``pipeline <subcommand> --config <path> [--section.key value ...]``

Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline as P

logger = logging.getLogger("egobody")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise P.ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pipeline", description="Egocentric views to a textured, rigged body mesh.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML config file (defaults apply to missing keys)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("gen-data", "render the synthetic dataset")
    add("train-translate", "train the egocentric -> third-person translation model")
    add("train-recover", "train the body parameter regressor")
    add("train-texture", "train the texture map generator")
    add("eval", "evaluate all three models on a dataset split")
    p = add("infer", "egocentric image pair -> mesh, texture, params and rendered views")
    p.add_argument("--ego-front", required=True)
    p.add_argument("--ego-back", required=True)
    p.add_argument("--out")
    p = add("export", "re-export a mesh bundle from a params file")
    p.add_argument("--params", required=True)
    p.add_argument("--texture", required=True)
    p.add_argument("--pose", help="pose sequence file; its first pose replaces the recovered one")
    p.add_argument("--out")
    p = add("animate", "render the recovered body under a pose sequence")
    p.add_argument("--params", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--texture", required=True)
    p.add_argument("--reference-texture", help="also render with this texture and report per-frame SSIM")
    p.add_argument("--out")
    p = add("sample-poses", "write a procedural pose sequence file")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--style", default="walk")
    p.add_argument("--pose-seed", type=int)
    return parser


def parse_overrides(extra: list[str]) -> dict:
    """``--a.b value`` / ``--a.b=value`` pairs -> {"a.b": "value"}."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise P.ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise P.ConfigError(f"missing value for --{key}")
            val = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    return x


def run(argv=None) -> dict:
    args, extra = build_parser().parse_known_args(argv)
    cfg = P.load_config(args.config, parse_overrides(extra))
    torch.set_num_threads(1)
    cmd = args.command
    if cmd == "gen-data":
        return P.cmd_gen_data(cfg)
    if cmd == "train-translate":
        return P.cmd_train_translate(cfg)
    if cmd == "train-recover":
        return P.cmd_train_recover(cfg)
    if cmd == "train-texture":
        return P.cmd_train_texture(cfg)
    if cmd == "eval":
        return P.cmd_eval(cfg)
    if cmd == "infer":
        return P.cmd_infer(cfg, args.ego_front, args.ego_back, args.out)
    if cmd == "export":
        return P.cmd_export(cfg, args.params, args.texture, args.out, args.pose)
    if cmd == "animate":
        return P.cmd_animate(cfg, args.params, args.sequence, args.texture, args.out, args.reference_texture)
    if cmd == "sample-poses":
        return P.cmd_sample_poses(cfg, args.out, args.frames, args.style, args.pose_seed)
    raise P.ConfigError(f"unknown command {cmd}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.DEBUG if ("-v" in argv or "--verbose" in argv) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(argv)
    except P.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    result = dict(result)
    if "summary" in result:
        print(result.pop("summary"))
    print(json.dumps(_jsonable(result), indent=1, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
