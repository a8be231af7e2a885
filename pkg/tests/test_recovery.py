import csv
import math
import warnings

import numpy as np
import pytest
import torch

from egobody.body_model import BodyParams, forward
from egobody.body_torch import TorchJointModel
from egobody.camera_rig import WeakPerspectiveCam
from egobody.dataset import sample_pose_sequence
from egobody.recovery import (
    PARAM_DIM, RECOVERY_COLUMNS, THETA_DIM, ContractViolation, NoVisibleJointsWarning, PriorDiscriminator,
    RecoveryTrainConfig, RecoveryTrainer, ThetaFull, adversarial_prior_step, build_regressor, default_mean_params,
    fit_recovery, load_recovery_checkpoint, loss_3d, make_batch, mean_params_from_frames, project_joints, recover,
    reproj_loss, save_recovery_checkpoint,
)
from egobody.translation import CheckpointError, cgan_loss

SMALL = RecoveryTrainConfig(image_size=64, base_channels=8, batch_size=4)


@pytest.fixture(scope="module")
def body(asset):
    return TorchJointModel(asset, dtype=torch.float64)


def gt_pred(frames):
    """Ground-truth ThetaFull vectors (camera-relative pose, beta, fitted camera)."""
    rows = []
    for f in frames:
        r = f.meta["recovery"]
        rows.append(np.concatenate([r["theta_view"], f.params.beta, [r["cam"]["s"]], r["cam"]["t"]]))
    return torch.tensor(np.array(rows), dtype=torch.float64)


# --------------------------------------------------------------- regressor

def test_forward_224_gives_85_finite_values():
    m = build_regressor(RecoveryTrainConfig(image_size=224, base_channels=8))
    out = m(torch.zeros(1, 3, 224, 224))
    assert out.shape == (1, THETA_DIM) == (1, 85)
    assert torch.isfinite(out).all()


def test_ief_iterations_keep_dimension():
    x = torch.randn(2, 3, 64, 64)
    for k in (1, 3):
        assert build_regressor(RecoveryTrainConfig(image_size=64, base_channels=8, ief_iterations=k))(x).shape == (2, 85)
    with pytest.raises(ValueError):
        RecoveryTrainConfig(ief_iterations=0).validate()
    with pytest.raises(ValueError):
        RecoveryTrainConfig(image_size=100).validate()


def test_zero_head_returns_mean_exactly():
    mean = np.random.default_rng(0).normal(size=85) * 0.1
    m = build_regressor(SMALL, mean)
    with torch.no_grad():
        m.decoder.weight.zero_()
        m.decoder.bias.zero_()
    out = m(torch.randn(3, 3, 64, 64))
    assert torch.equal(out, torch.as_tensor(mean, dtype=torch.float32).expand(3, -1))


def test_untrained_recover_is_near_mean(frame64):
    m = build_regressor(SMALL)
    th = recover(m, frame64.tp_front)
    assert np.abs(th.to_vector() - default_mean_params()).max() < 0.05
    assert np.array_equal(th.to_vector(), recover(m, frame64.tp_front).to_vector())
    with pytest.raises(ValueError):
        recover(m, np.zeros((32, 32, 3), np.uint8))


# ------------------------------------------------------------------ reproj

def reproj_setup(body, frames):
    pred = gt_pred(frames)
    with torch.no_grad():
        j2d = project_joints(pred, body)
    return pred, j2d, torch.ones(len(frames), 24, dtype=torch.bool)


def test_reproj_zero_at_ground_truth(body, frames16):
    pred, j2d, vis = reproj_setup(body, frames16[:4])
    assert reproj_loss(pred, j2d, vis, body).item() < 1e-6


def test_reproj_all_invisible(body, frames16):
    pred, j2d, vis = reproj_setup(body, frames16[:2])
    with pytest.warns(NoVisibleJointsWarning):
        loss = reproj_loss(pred + 0.3, j2d, torch.zeros_like(vis), body)
    assert loss.item() == 0.0


def test_reproj_translation_shift(body, frames16):
    pred, j2d, vis = reproj_setup(body, frames16[:3])
    shifted = pred.clone()
    shifted[:, PARAM_DIM + 1] += 0.1
    assert abs(reproj_loss(shifted, j2d, vis, body).item() - 0.1) < 1e-9


def test_reproj_visible_joints_only(body, frames16):
    pred, j2d, vis = reproj_setup(body, frames16[:1])
    vis[0, 5:] = False
    j2d = j2d.clone()
    j2d[0, 5:] += 10.0          # hidden joints may be arbitrarily wrong
    j2d[0, :5, 0] += 0.2
    assert abs(reproj_loss(pred, j2d, vis, body).item() - 0.2) < 1e-9


def test_reproj_scale_ambiguity(body, frames16):
    pred = gt_pred(frames16[:2])
    _, beta, s, t = pred[:, :72], pred[:, 72:82], pred[:, 82], pred[:, 83:]
    J = body(pred[:, :72], beta)
    J = J - J[:, :1]
    vis = torch.ones(2, 24, dtype=torch.bool)
    for k in (0.5, 2.0, 7.0):
        # scaled 3D joints seen through a camera with s/k
        j2d = (s / k)[:, None, None] * (k * J)[..., :2] + t[:, None]
        assert reproj_loss(pred, j2d, vis, body).item() < 1e-6


# ---------------------------------------------------------------- loss_3d

def test_loss_3d_zero_at_ground_truth(body, frames16):
    pred = gt_pred(frames16[:3])
    J = body(pred[:, :72], pred[:, 72:82])
    assert loss_3d(pred, pred[:, :PARAM_DIM], J, body).item() < 1e-12


def test_loss_3d_unit_beta_offset(body, frames16):
    pred = gt_pred(frames16[:2])
    gt = pred[:, :PARAM_DIM].clone()
    J = body(pred[:, :72], pred[:, 72:82])
    off = pred.clone()
    off[:, 72 + 3] += 1.0
    assert abs(loss_3d(off, gt, J, body, w_joints=0.0).item() - 1 / 82) < 1e-12
    # the joint term still sees the changed shape
    assert loss_3d(off, gt, J, body, w_params=0.0).item() > 1e-6


def test_loss_3d_translation_invariant(body, frames16):
    pred = gt_pred(frames16[:2])
    J = body(pred[:, :72], pred[:, 72:82]) + torch.tensor([3.0, -1.0, 0.5], dtype=torch.float64)
    assert loss_3d(pred, pred[:, :PARAM_DIM], J, body).item() < 1e-12


def test_loss_3d_contract(body, frames16):
    pred = gt_pred(frames16[:2])
    J = body(pred[:, :72], pred[:, 72:82])
    with pytest.raises(ContractViolation):
        loss_3d(pred, pred[:, :PARAM_DIM], J, body, has_3d=torch.tensor([True, False]))


# ------------------------------------------------------------------ prior

def test_prior_loss_at_half():
    D = PriorDiscriminator()
    with torch.no_grad():
        D.net[-1].weight.zero_()
        D.net[-1].bias.zero_()
    p = torch.randn(5, PARAM_DIM)
    loss_d, loss_adv = adversarial_prior_step(D, p, p)
    assert abs(loss_d.item() - math.log(4)) < 1e-6
    assert abs(loss_adv.item() - math.log(2)) < 1e-6


def test_prior_label_swap_symmetry():
    torch.manual_seed(0)
    D = PriorDiscriminator()
    a, b = torch.randn(6, PARAM_DIM), torch.randn(6, PARAM_DIM)
    da, db = D(a), D(b)
    loss_ab, _ = cgan_loss(da, db)
    # swapping which batch is real is the same as negating every logit
    loss_ba_neg, _ = cgan_loss(-db, -da)
    loss_ab_step, _ = adversarial_prior_step(D, a, b)
    assert abs(loss_ab.item() - loss_ba_neg.item()) < 1e-6
    assert abs(loss_ab.item() - loss_ab_step.item()) < 1e-6
    same, _ = adversarial_prior_step(D, a, a)
    flipped, _ = cgan_loss(-D(a), -D(a))
    assert abs(same.item() - flipped.item()) < 1e-6


def real_pose_pool(n_clips=40, frames=20):
    rows = []
    for i in range(n_clips):
        for p in sample_pose_sequence(500 + i, frames, ("walk", "box", "jump", "dance", "idle")[i % 5]):
            rows.append(np.concatenate([p.theta, p.beta]))
    return torch.tensor(np.array(rows), dtype=torch.float32)


def uniform_poses(rng, n):
    theta = rng.uniform(-np.pi, np.pi, (n, 72))
    beta = rng.uniform(-2.5, 2.5, (n, 10))
    return torch.tensor(np.hstack([theta, beta]), dtype=torch.float32)


@pytest.mark.slow
def test_prior_separates_dataset_poses_from_uniform_noise():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    real = real_pose_pool()
    train, held = real[::2], real[1::2]
    D = PriorDiscriminator()
    opt = torch.optim.Adam(D.parameters(), lr=1e-4)
    for _ in range(500):
        r = train[torch.as_tensor(rng.choice(len(train), 32))]
        loss_d, _ = adversarial_prior_step(D, r, uniform_poses(rng, 32))
        opt.zero_grad()
        loss_d.backward()
        opt.step()
    with torch.no_grad():
        acc_real = (D(held) > 0).float().mean().item()
        acc_fake = (D(uniform_poses(rng, len(held))) < 0).float().mean().item()
    assert (acc_real + acc_fake) / 2 > 0.9


# ------------------------------------------------------------- objective

@pytest.fixture(scope="module")
def batch(asset, frames16):
    return make_batch(frames16[:4], TorchJointModel(asset))


def model_grads(trainer, loss):
    return torch.autograd.grad(loss, list(trainer.model.parameters()), retain_graph=True)


def fixed_pred(trainer, batch):
    trainer.model.eval()
    return trainer.model(batch.images)


def test_objective_gradient_additivity(asset, batch):
    lam = 4.0
    tr = RecoveryTrainer(RecoveryTrainConfig(image_size=64, base_channels=8, lam=lam), asset)
    pred = fixed_pred(tr, batch)
    total, terms = tr.objective(batch, pred=pred, real=batch.params)
    g_tot = model_grads(tr, total)
    g_rep = model_grads(tr, terms["loss_reproj"])
    g_3d = model_grads(tr, terms["loss_3d"])
    g_adv = model_grads(tr, terms["loss_adv"])
    worst = max((a - (lam * (b + c) + d)).abs().max().item() for a, b, c, d in zip(g_tot, g_rep, g_3d, g_adv))
    assert worst < 1e-6


def test_indicator_off_removes_3d_gradient(asset, batch):
    def grads(use_3d, params):
        tr = RecoveryTrainer(RecoveryTrainConfig(image_size=64, base_channels=8, use_3d_supervision=use_3d), asset)
        b = batch.subset(slice(None))
        b.params = params
        total, terms = tr.objective(b, pred=fixed_pred(tr, b), real=batch.params)
        return terms, [g.clone() for g in model_grads(tr, total)]

    noise = batch.params + torch.randn_like(batch.params)
    terms, g_a = grads(False, batch.params)
    _, g_b = grads(False, noise)
    assert terms["loss_3d"] is None
    assert all(torch.equal(a, b) for a, b in zip(g_a, g_b))
    _, g_c = grads(True, batch.params)
    _, g_d = grads(True, noise)
    assert not all(torch.equal(a, b) for a, b in zip(g_c, g_d))


def test_objective_partial_3d_scaled_by_fraction(asset, batch):
    tr = RecoveryTrainer(RecoveryTrainConfig(image_size=64, base_channels=8), asset)
    pred = fixed_pred(tr, batch)
    b = batch.subset(slice(None))
    b.has_3d = torch.tensor([True, False, True, False])
    _, terms = tr.objective(b, pred=pred, real=batch.params)
    sel = torch.tensor([0, 2])
    direct = loss_3d(pred[sel], b.params[sel], b.joints3d[sel], tr.body) * 0.5
    assert abs(terms["loss_3d"].item() - direct.item()) < 1e-6


def test_lambda_zero_total_is_adversarial(asset, batch):
    tr = RecoveryTrainer(RecoveryTrainConfig(image_size=64, base_channels=8, lam=0.0), asset)
    total, terms = tr.objective(batch, pred=fixed_pred(tr, batch), real=batch.params)
    assert total.item() == terms["loss_adv"].item()


def test_training_reproducible_and_logged(asset, batch, tmp_path):
    cfg = RecoveryTrainConfig(image_size=64, base_channels=8, batch_size=2, seed=3)
    a = fit_recovery(RecoveryTrainer(cfg, asset), batch, steps=5, log_path=tmp_path / "m.csv")
    b = fit_recovery(RecoveryTrainer(cfg, asset), batch, steps=5)
    assert a == b
    rows = list(csv.reader((tmp_path / "m.csv").open()))
    assert tuple(rows[0]) == RECOVERY_COLUMNS and len(rows) == 6


# ----------------------------------------------------- params + checkpoints

def test_recovered_root_is_canonical(asset, batch, frame64):
    tr = RecoveryTrainer(RecoveryTrainConfig(image_size=64, base_channels=8), asset)
    with torch.no_grad():
        tr.model.mean_params[:3] = torch.tensor([0.0, 5.0, 0.0])     # past pi on purpose
    th = recover(tr.model, frame64.tp_front)
    assert np.linalg.norm(th.theta[:3]) <= np.pi + 1e-9
    assert th.cam.s > 0


def test_theta_full_meta_round_trip(frame64):
    th = ThetaFull(np.random.default_rng(0).normal(size=72) * 0.3, np.arange(10) * 0.1,
                   WeakPerspectiveCam(1.2, [0.1, -0.2]))
    back = ThetaFull.from_meta(th.to_meta())
    np.testing.assert_allclose(back.to_vector(), th.to_vector())
    assert np.array_equal(ThetaFull.from_vector(th.to_vector()).to_vector(), th.to_vector())
    # the dataset frame meta files are readable too
    from_frame = ThetaFull.from_meta(frame64.meta)
    assert np.array_equal(from_frame.beta, frame64.params.beta)
    with pytest.raises(ValueError):
        ThetaFull(np.full(72, np.nan), np.zeros(10), WeakPerspectiveCam(1.0, [0, 0]))


def test_checkpoint_round_trip(asset, batch, frames16, tmp_path):
    tr = RecoveryTrainer(SMALL, asset, mean_params=mean_params_from_frames(frames16),
                         prior_pool=batch.params.numpy())
    fit_recovery(tr, batch, steps=2)
    save_recovery_checkpoint(tr, tmp_path / "r.pt")
    back = load_recovery_checkpoint(tmp_path / "r.pt", asset, expected_image_size=64)
    assert back.step == 2
    for f in frames16[:3]:
        assert np.array_equal(recover(tr.model, f.tp_front).to_vector(), recover(back.model, f.tp_front).to_vector())
    with pytest.raises(CheckpointError):
        load_recovery_checkpoint(tmp_path / "r.pt", asset, expected_image_size=128)
    save_recovery_checkpoint(tr, tmp_path / "s.pt")
    assert (tmp_path / "r.pt").read_bytes() == (tmp_path / "s.pt").read_bytes()


def test_recovered_params_drive_the_body_model(asset, frame64):
    th = recover(build_regressor(SMALL), frame64.tp_front)
    mesh = forward(asset, th.body_params())
    assert np.isfinite(mesh.vertices).all()
    assert isinstance(th.body_params(), BodyParams)


def test_mean_params_from_frames(frames16):
    m = mean_params_from_frames(frames16)
    assert m.shape == (85,)
    np.testing.assert_allclose(m[72:82], np.mean([f.params.beta for f in frames16], axis=0))
    assert m[82] > 0


def test_no_visible_joint_training_step_warns_not_crashes(asset, batch):
    tr = RecoveryTrainer(RecoveryTrainConfig(image_size=64, base_channels=8), asset)
    b = batch.subset(slice(None))
    b.visibility = torch.zeros_like(b.visibility)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        tr.objective(b)
    assert any(issubclass(x.category, NoVisibleJointsWarning) for x in w)
