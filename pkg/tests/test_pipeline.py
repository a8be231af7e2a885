import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from egobody import pipeline as P
from egobody.body_model import BodyParams, PosedAvatar, forward, load_obj, load_skeleton
from egobody.camera_rig import camera_world_pose
from egobody.cli import main, parse_overrides
from egobody.dataset import load_manifest, load_split
from egobody.inference import turntable_cameras
from egobody.renderer import load_png, rasterize

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"
DEFAULT = ROOT / "configs" / "default.yaml"
BUNDLE = {"mesh.obj", "mesh.mtl", "skeleton.txt", "texture.png", "params.txt",
          "views/view_000.png", "views/view_090.png", "views/view_180.png", "views/view_270.png"}


def tree(d: Path) -> set:
    return {str(p.relative_to(d)) for p in d.rglob("*") if p.is_file()}


def digests(d: Path) -> dict:
    return {str(p.relative_to(d)): hashlib.sha256(p.read_bytes()).hexdigest() for p in d.rglob("*") if p.is_file()}


# ----------------------------------------------------------------- config

def test_default_file_matches_code_defaults():
    assert P.load_config(DEFAULT) == P.PipelineConfig()
    assert P.load_config(None) == P.PipelineConfig()


def test_every_default_is_written_down():
    documented = yaml.safe_load(DEFAULT.read_text())
    assert documented == P.config_to_dict(P.PipelineConfig())


def test_unknown_keys_rejected(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset:\n  sequencez: 3\n")
    with pytest.raises(P.ConfigError, match="sequencez"):
        P.load_config(bad)
    with pytest.raises(P.ConfigError):
        P.load_config(SMOKE, {"recovery.nope": "1"})


def test_overrides_are_typed():
    cfg = P.load_config(SMOKE, {"translation.lr_g": "3e-4", "dataset.sequences": "5",
                                "translation.use_skip_connections": "false", "evaluation.arrangement_time_limit": "12"})
    assert cfg.translation.lr_g == 3e-4 and cfg.dataset.sequences == 5
    assert cfg.translation.use_skip_connections is False
    assert cfg.evaluation.arrangement_time_limit == 12.0
    with pytest.raises(P.ConfigError):
        P.load_config(SMOKE, {"dataset.sequences": "many"})
    with pytest.raises(P.ConfigError):
        P.load_config(SMOKE, {"dataset.sequences": "true"})
    with pytest.raises(P.ConfigError):
        P.load_config(SMOKE, {"translation.arrangement": "Z"})


def test_parse_overrides():
    assert parse_overrides(["--a.b", "1", "--c-d=x"]) == {"a.b": "1", "c_d": "x"}
    with pytest.raises(P.ConfigError):
        parse_overrides(["--a.b"])
    with pytest.raises(P.ConfigError):
        parse_overrides(["stray"])


def test_exit_codes(tmp_path, capsys):
    assert main(["eval", "--config", str(SMOKE), "--dataset.bogus", "1"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["infer", "--config", str(SMOKE)]) == 2          # required flags missing
    assert main(["eval", "--config", str(tmp_path / "nope.yaml")]) == 2
    # valid config but no dataset: a runtime failure naming the fix
    rc = main(["train-translate", "--config", str(SMOKE), "--dataset.root", str(tmp_path / "none")])
    assert rc == 1
    assert "gen-data" in capsys.readouterr().err


# ------------------------------------------------------------ end to end

@pytest.fixture(scope="module")
def run(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipe")
    overrides = {"dataset.root": str(base / "data"), "output_root": str(base / "run"),
                 "translation.steps": "3", "recovery.steps": "3", "texture.steps": "3"}
    cfg = P.load_config(SMOKE, overrides)
    gen = P.cmd_gen_data(cfg)
    for cmd in (P.cmd_train_translate, P.cmd_train_recover, P.cmd_train_texture):
        cmd(cfg)
    m = load_manifest(cfg.dataset.root)
    test = load_split(m, "test")[0]
    entry = next(e for e in m.frames if e["split"] == "test")
    ego = {k: m.root / entry["files"][k] for k in ("ego_front", "ego_back")}
    return {"cfg": cfg, "overrides": overrides, "base": base, "gen": gen, "frame": test, "ego": ego}


def test_gen_data_is_reproducible(run):
    again = P.cmd_gen_data(run["cfg"])
    assert again["manifest_sha256"] == run["gen"]["manifest_sha256"]
    assert again["frames"] == 8


def test_training_is_idempotent(run):
    cfg = run["cfg"]
    before = {k: cfg.checkpoint(k).read_bytes() for k in ("translation", "recovery", "texture")}
    P.cmd_train_translate(cfg)
    P.cmd_train_texture(cfg)
    P.cmd_train_recover(cfg)
    for k, b in before.items():
        assert cfg.checkpoint(k).read_bytes() == b, k
    header = cfg.metrics("translation").read_text().splitlines()
    assert header[0] == "step,loss_D,loss_G_adv,loss_L1" and len(header) == 4


@pytest.fixture(scope="module")
def inferred(run):
    out = run["base"] / "infer"
    ck = {k: run["cfg"].checkpoint(k).read_bytes() for k in ("translation", "recovery", "texture")}
    res = P.cmd_infer(run["cfg"], run["ego"]["ego_front"], run["ego"]["ego_back"], out)
    return {"out": out, "res": res, "checkpoints": ck}


def test_infer_artifact_contract(inferred):
    out = inferred["out"]
    assert tree(out) == BUNDLE
    verts, uvs, faces = load_obj(out / "mesh.obj")
    assert len(verts) > 0 and len(faces) > 0
    assert uvs.min() >= 0 and uvs.max() <= 1
    assert "map_Kd texture.png" in (out / "mesh.mtl").read_text()
    assert len(load_skeleton(out / "skeleton.txt")["parents"]) == 24
    assert not any(p.name.startswith(".") for p in out.parent.iterdir())     # no temp dirs left


def test_infer_params_reload_and_render(run, inferred):
    th = P.read_params(inferred["out"] / "params.txt")
    mesh = forward(P._asset(run["cfg"]), th.body_params())
    tex = load_png(inferred["out"] / "texture.png")
    spec = turntable_cameras(64)[0]
    img = rasterize(mesh, tex, spec, camera_world_pose(spec, mesh.joint_transforms))
    assert img.shape == (64, 64, 3)
    assert isinstance(th.body_params(), BodyParams)


def test_infer_is_idempotent_and_leaves_checkpoints(run, inferred, tmp_path):
    P.cmd_infer(run["cfg"], run["ego"]["ego_front"], run["ego"]["ego_back"], tmp_path / "again")
    assert digests(tmp_path / "again") == digests(inferred["out"])
    for k, b in inferred["checkpoints"].items():
        assert run["cfg"].checkpoint(k).read_bytes() == b


def test_infer_via_cli(run, tmp_path, capsys):
    args = ["infer", "--config", str(SMOKE), "--ego-front", str(run["ego"]["ego_front"]),
            "--ego-back", str(run["ego"]["ego_back"]), "--out", str(tmp_path / "cli")]
    for k, v in run["overrides"].items():
        args += [f"--{k}", v]
    assert main(args) == 0
    assert json.loads(capsys.readouterr().out)["out"] == str(tmp_path / "cli")
    assert tree(tmp_path / "cli") == BUNDLE
    bad = args[:]
    bad[bad.index("--ego-front") + 1] = str(tmp_path / "missing.png")
    assert main(bad) == 2


def test_missing_checkpoint_names_training_command(run, tmp_path):
    cfg = P.load_config(SMOKE, {**run["overrides"], "output_root": str(tmp_path / "empty")})
    with pytest.raises(P.PipelineError, match="train-translate"):
        P.cmd_infer(cfg, run["ego"]["ego_front"], run["ego"]["ego_back"], tmp_path / "o")
    assert not (tmp_path / "o").exists()


def test_failed_infer_leaves_nothing(run, tmp_path, monkeypatch):
    def boom(*a, **kw):
        raise RuntimeError("render failed")
    monkeypatch.setattr(P, "render_views", boom)
    with pytest.raises(RuntimeError):
        P.cmd_infer(run["cfg"], run["ego"]["ego_front"], run["ego"]["ego_back"], tmp_path / "o")
    assert list(tmp_path.iterdir()) == []


def test_eval_command(run):
    res = P.cmd_eval(run["cfg"])
    out = run["cfg"].out / "eval"
    assert {"eval_report.json", "eval_samples.csv", "timing.json", "summary.txt"} <= {p.name for p in out.iterdir()}
    assert res["aggregate"]["n"] == 4
    timing = json.loads((out / "timing.json").read_text())
    assert timing["reference"]["hardware"] == "Tesla K80"


# ------------------------------------------------------------- animation

def test_identity_sequence_matches_front_view(run, inferred, tmp_path):
    th = P.read_params(inferred["out"] / "params.txt")
    seq = P.write_sequence(tmp_path / "one.json", [th.body_params().theta])
    res = P.cmd_animate(run["cfg"], inferred["out"] / "params.txt", seq, inferred["out"] / "texture.png",
                        tmp_path / "anim")
    assert res["frames"] == 1
    a = (tmp_path / "anim" / "frame_00000.png").read_bytes()
    b = (inferred["out"] / "views" / "view_000.png").read_bytes()
    assert np.array_equal(load_png(tmp_path / "anim" / "frame_00000.png"),
                          load_png(inferred["out"] / "views" / "view_000.png"))
    assert a == b


def test_walk_animation_keeps_shape(run, inferred, tmp_path):
    seq = P.cmd_sample_poses(run["cfg"], tmp_path / "walk.json", frames=30, style="walk")["out"]
    res = P.cmd_animate(run["cfg"], inferred["out"] / "params.txt", seq, inferred["out"] / "texture.png",
                        tmp_path / "anim")
    frames = sorted((tmp_path / "anim").glob("frame_*.png"))
    assert res["frames"] == 30 and len(frames) == 30
    info = json.loads((tmp_path / "anim" / "animation.json").read_text())
    th = P.read_params(inferred["out"] / "params.txt")
    assert info["beta"] == th.beta.tolist()
    expected = PosedAvatar(P._asset(run["cfg"]), th.beta).shape_hash()
    assert info["shape_hash"] == res["shape_hash"] == expected


def test_animation_reports_ssim_against_reference_texture(run, inferred, tmp_path):
    m = load_manifest(run["cfg"].dataset.root)
    entry = next(e for e in m.frames if e["split"] == "test")
    seq = P.cmd_sample_poses(run["cfg"], tmp_path / "s.json", frames=3, style="box")["out"]
    res = P.cmd_animate(run["cfg"], inferred["out"] / "params.txt", seq, inferred["out"] / "texture.png",
                        tmp_path / "anim", reference_texture=m.root / entry["files"]["texture"])
    info = json.loads((tmp_path / "anim" / "animation.json").read_text())
    assert len(info["ssim_vs_reference"]) == 3
    assert -1 <= res["mean_ssim_vs_reference"] <= 1


@pytest.mark.parametrize("content", [
    "not json", '{"format_version": 1}', '{"format_version": 2, "thetas": []}',
    '{"format_version": 1, "thetas": [[0, 0, 0]]}', '{"format_version": 1, "thetas": []}',
])
def test_malformed_sequence(run, inferred, tmp_path, content):
    seq = tmp_path / "bad.json"
    seq.write_text(content)
    with pytest.raises(P.ConfigError):
        P.cmd_animate(run["cfg"], inferred["out"] / "params.txt", seq, inferred["out"] / "texture.png", tmp_path / "a")
    assert not (tmp_path / "a").exists()


def test_export_with_pose_override(run, inferred, tmp_path):
    seq = P.cmd_sample_poses(run["cfg"], tmp_path / "s.json", frames=2, style="dance", seed=5)["out"]
    P.cmd_export(run["cfg"], inferred["out"] / "params.txt", inferred["out"] / "texture.png", tmp_path / "exp",
                 pose_override=seq)
    assert tree(tmp_path / "exp") == BUNDLE
    th = P.read_params(tmp_path / "exp" / "params.txt")
    first = json.loads(seq.read_text())["thetas"][0]
    np.testing.assert_allclose(th.theta, first, atol=1e-12)
    assert th.beta.tolist() == P.read_params(inferred["out"] / "params.txt").beta.tolist()


def test_sample_poses_errors(run, tmp_path):
    with pytest.raises(P.ConfigError):
        P.cmd_sample_poses(run["cfg"], tmp_path / "x.json", frames=3, style="moonwalk")
