import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from egobody.evaluation import (
    REFERENCE_ARRANGEMENT, REFERENCE_TIMINGS, REPORT_NOTES, EvalReport, crop_subject, evaluate,
    format_arrangement_table, joints_rmse, luma, method_a_views, rmse, root_aligned_errors,
    run_arrangement_experiment, ssim, time_pipeline,
)
from egobody.body_model import BodyParams
from egobody.dataset import arrange_target
from egobody.inference import STAGES
from egobody.renderer import DEFAULT_BG


def rand_img(seed, h=32, w=32):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


# ------------------------------------------------------------------- rmse

def test_rmse_basics():
    a = rand_img(0)
    assert rmse(a, a) == 0.0
    low = (a // 2).astype(np.uint8)
    assert rmse(low + 10, low) == 10.0
    with pytest.raises(ValueError):
        rmse(a, a[:4])


def test_rmse_loop_oracle():
    a, b = rand_img(1, 9, 7), rand_img(2, 9, 7)
    acc = 0.0
    for v, w in zip(a.flatten().tolist(), b.flatten().tolist()):
        acc += (v - w) ** 2
    assert abs(rmse(a, b) - (acc / a.size) ** 0.5) < 1e-6


# ------------------------------------------------------------------- ssim

@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(11, 24), st.integers(11, 24), st.just(3))))
def test_identity_property(img):
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    assert rmse(img, img) == 0.0


def test_ssim_inverted_image():
    # values avoid mid-gray so the inverse is genuinely different
    rng = np.random.default_rng(3)
    yy, xx = np.mgrid[:48, :48]
    base = ((xx // 6 + yy // 6) % 2) * 150 + rng.integers(0, 100, (48, 48))
    base[base >= 100] += 5
    img = np.repeat(base[..., None], 3, axis=2).astype(np.uint8)
    assert not np.isin(img, [127, 128]).any()
    assert ssim(img, 255 - img) < 0.3


def test_ssim_constant_closed_form():
    for ca, cb in ((10, 200), (128, 128), (0, 255), (77, 90)):
        a, b = np.full((16, 16, 3), ca, np.uint8), np.full((16, 16, 3), cb, np.uint8)
        C1 = (0.01 * 255) ** 2
        mu_a, mu_b = luma(a)[0, 0], luma(b)[0, 0]
        expect = (2 * mu_a * mu_b + C1) / (mu_a ** 2 + mu_b ** 2 + C1)
        assert abs(ssim(a, b) - expect) < 1e-9


def test_ssim_symmetric_and_matches_reference():
    for seed in range(3):
        a, b = rand_img(seed, 40, 30), rand_img(seed + 10, 40, 30)
        b = ((a.astype(int) + b) // 2).astype(np.uint8)     # correlated pair
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9
        ref = structural_similarity(luma(a), luma(b), gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=255)
        assert abs(ssim(a, b) - ref) < 1e-9


def test_ssim_small_image_error():
    with pytest.raises(ValueError):
        ssim(rand_img(0, 10, 10), rand_img(1, 10, 10))


# ----------------------------------------------------------------- joints

def test_joints_rmse_345():
    gt = np.random.default_rng(0).uniform(0, 64, (24, 2))
    assert joints_rmse(gt, gt, np.ones(24, bool)) == 0.0
    assert joints_rmse(gt + [3.0, 4.0], gt, np.ones(24, bool)) == 5.0


def test_joints_rmse_monte_carlo():
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 64, (24, 2))
    vals = [joints_rmse(gt + rng.normal(0, 2.0, gt.shape), gt, np.ones(24, bool)) for _ in range(1000)]
    assert abs(np.mean(vals) - 2 * np.sqrt(2)) < 0.15 * 2 * np.sqrt(2)


def test_joints_rmse_permutation_and_mask():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0, 64, (24, 2)), rng.uniform(0, 64, (24, 2))
    vis = rng.random(24) > 0.3
    perm = rng.permutation(24)
    assert joints_rmse(a, b, vis) == pytest.approx(joints_rmse(a[perm], b[perm], vis[perm]), abs=1e-12)
    c = a.copy()
    c[~vis] += 1000.0          # hidden joints do not count
    assert joints_rmse(c, b, vis) == pytest.approx(joints_rmse(a, b, vis), abs=1e-12)
    with pytest.raises(ValueError):
        joints_rmse(a, b, np.zeros(24, bool))


def test_root_aligned_errors(asset):
    p = BodyParams.zeros()
    j, v = root_aligned_errors(p, p, asset)
    assert j.shape == (24,) and np.all(j == 0) and np.all(v == 0)
    q = BodyParams(np.zeros(10), np.r_[[0.0, 1.0, 0.0], np.zeros(69)])
    j, _ = root_aligned_errors(q, p, asset)
    assert j[0] == 0 and j.max() > 0.05


# ----------------------------------------------------------------- report

def test_report_aggregates_equal_means(tmp_path):
    rng = np.random.default_rng(0)
    rep = EvalReport()
    for i in range(7):
        rep.add(f"s{i}", rmse_v=rng.uniform(0, 80), ssim_v=rng.uniform(), joints_rmse_v=rng.uniform(0, 9),
                joint_err=rng.uniform(0, 0.1, 24), vertex_err=rng.uniform(0, 0.1),
                timings={s: rng.uniform() for s in STAGES})
    agg = rep.aggregate()
    assert agg["n"] == 7
    for key, vals in (("rmse", rep.rmse), ("ssim", rep.ssim), ("joints_rmse_px", rep.joints_rmse),
                      ("vertex_error_m", rep.vertex_error)):
        assert abs(agg[key] - sum(vals) / len(vals)) < 1e-9
    assert abs(agg["mpjpe_m"] - np.mean(rep.joint_error_3d)) < 1e-9
    for s in STAGES:
        assert abs(agg["timings_s"][s] - np.mean(rep.timings[s])) < 1e-9
    paths = rep.save(tmp_path)
    data = json.loads(paths["json"].read_text())
    assert data["notes"] == REPORT_NOTES and data["aggregate"]["n"] == 7
    assert len(paths["csv"].read_text().strip().splitlines()) == 8
    assert "SSIM" in rep.summary()


def test_evaluate_runs_every_stage(tiny_models, frames16):
    rep = evaluate(tiny_models, frames16[:2])
    agg = rep.aggregate()
    assert agg["n"] == 2
    assert 0 <= agg["rmse"] <= 255 and -1 <= agg["ssim"] <= 1
    assert np.isfinite(agg["joints_rmse_px"]) and np.isfinite(agg["mpjpe_m"])
    assert all(len(rep.timings[s]) == 2 for s in STAGES)


# ----------------------------------------------------------- arrangements

def test_crop_subject():
    tgt = np.full((64, 64, 3), DEFAULT_BG, np.uint8)
    tgt[20:30, 40:50] = (255, 0, 0)
    gen = rand_img(0, 64, 64)
    g, t = crop_subject(gen, tgt)
    assert g.shape == t.shape == (64, 64, 3)
    # the subject fills most of the rescaled crop
    assert (np.abs(t.astype(int) - DEFAULT_BG).sum(-1) > 0).mean() > 0.3
    empty = np.full((64, 64, 3), DEFAULT_BG, np.uint8)
    g2, t2 = crop_subject(gen, empty)
    assert g2 is gen and t2 is empty


def test_method_a_scores_each_view(frame64):
    tgt = arrange_target(frame64.tp_front, frame64.tp_back, "A")
    views = method_a_views(tgt, tgt)
    assert len(views) == 2
    assert all(rmse(g, t) == 0 for g, t in views)


def test_arrangement_experiment_table(frames16):
    rows = run_arrangement_experiment(frames16[:2], frames16[2:3], train_budget=2,
                                      gen_kw=dict(depth=3, base_channels=8))
    assert [r.method for r in rows] == ["A", "B", "C"]
    for r in rows:
        assert 0 < r.ssim < 1 and np.isfinite(r.rmse)
        assert (r.ref_rmse, r.ref_ssim) == REFERENCE_ARRANGEMENT[r.method]
        assert r.steps == 2 and not r.partial
    table = format_arrangement_table(rows)
    assert len(table.splitlines()) == 4 and "complete" in table
    # reference values
    assert REFERENCE_ARRANGEMENT == {"A": (89.0, 0.67), "B": (53.2, 0.72), "C": (40.1, 0.89)}


def test_arrangement_partial_marker(frames16):
    rows = run_arrangement_experiment(frames16[:2], frames16[2:3], train_budget=5,
                                      gen_kw=dict(depth=3, base_channels=8), time_limit=0.0)
    assert all(r.partial and r.steps == 0 for r in rows)
    assert "partial" in format_arrangement_table(rows)
    with pytest.raises(ValueError):
        run_arrangement_experiment(frames16[:2], frames16[2:3], train_budget=0)


# ----------------------------------------------------------------- timing

def test_time_pipeline(tiny_models, frames16):
    samples = [(f.ego_front, f.ego_back) for f in frames16[:6]]
    a = time_pipeline(tiny_models, samples)
    b = time_pipeline(tiny_models, samples)
    assert list(a["stages"]) == list(STAGES) and len(STAGES) == 3
    assert all(a["stages"][s]["n"] == 6 for s in STAGES)
    assert a["reference"]["seconds"] == REFERENCE_TIMINGS
    assert REFERENCE_TIMINGS == {"view_translation": 0.6, "parameter_estimation": 0.12, "texture_generation": 0.56}
    assert a["reference"]["hardware"] == "Tesla K80" and a["hardware"]
    for s in STAGES:
        ma, mb = a["stages"][s]["mean"], b["stages"][s]["mean"]
        assert abs(ma - mb) <= 0.5 * max(ma, mb), (s, ma, mb)
