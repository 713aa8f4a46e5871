import copy

import pytest
import torch
from torch import nn

from icedit.denoiser import Arch, build_model
from icedit.diffusion import add_noise, ddim_jump, ddim_solve, ddim_step
from icedit.icd import (BACKWARD, FORWARD, ICDConfig, SegmentPlan, cm_apply, init_pair, loss_cd, loss_preserve,
                        multistep_sample, segment_of, train_icd)

from conftest import small_batch


class TrajectoryOracle(nn.Module):
    """Predicts the exact noise that puts every input on the ray through ``x0``: self-consistent by construction."""

    def __init__(self, x0, schedule):
        super().__init__()
        self.x0, self.schedule = x0, schedule
        self.role = "oracle"
        self.n_evals = 0
        self.w = nn.Parameter(torch.zeros(()))

    def eps(self, z, t, label, omega=0.0):
        return self.predict(z, t, label, omega)[0]

    def predict(self, z, t, label, omega=0.0):
        self.n_evals += 1
        a, s = self.schedule.coef(t, z)
        return (z - a * self.x0) / s.clamp(min=1e-12) + 0 * self.w, self.x0 + 0 * self.w


def test_plan_validation():
    assert SegmentPlan.uniform(64, 4).boundaries == (0, 16, 32, 48, 64)
    with pytest.raises(ValueError):
        SegmentPlan((0, 16, 16, 64))
    with pytest.raises(ValueError):
        SegmentPlan((1, 16, 64))


@pytest.mark.parametrize("t,expected", [(20, (1, 16, 32)), (16, (1, 16, 32)), (64, (3, 48, 64)), (0, (0, 0, 16)),
                                        (47, (2, 32, 48))])
def test_segment_of(plan, t, expected):
    assert segment_of(t, plan) == expected


def test_segment_of_out_of_range(plan):
    with pytest.raises(ValueError):
        segment_of(65, plan)


def test_cm_apply_one_evaluation_and_targets(model, schedule, plan):
    z = torch.randn(3, 1, 16, 16)
    t = torch.tensor([5, 20, 60])
    model.n_evals = 0
    with torch.no_grad():
        out_f = cm_apply(model, schedule, z, t, 1, 0.0, FORWARD, plan)
        assert model.n_evals == 1
        target = torch.tensor([16, 32, 64])
        eps, x0 = model.predict(z, t, 1)
        assert torch.equal(out_f, ddim_jump(schedule, z, eps, x0, t, target))
        # same move as the eps-only DDIM step, up to its cancellation error near t = T
        ref = ddim_step(schedule, z, eps, t, target)
    assert torch.allclose(out_f, ref, atol=1e-3)


def test_cm_apply_at_target_boundary_is_identity(model, schedule, plan):
    z = torch.randn(2, 1, 16, 16)
    with torch.no_grad():
        assert torch.equal(cm_apply(model, schedule, z, 64, 1, 0.0, FORWARD, plan), z)
        assert torch.equal(cm_apply(model, schedule, z, 0, 1, 0.0, BACKWARD, plan), z)


def test_loss_cd_vanishes_at_self_consistent_fixed_point(schedule, plan):
    x0, y = small_batch(4, 2)
    x0 = x0.double()
    oracle = TrajectoryOracle(x0, schedule)
    for direction in (FORWARD, BACKWARD):
        g = torch.Generator().manual_seed(0)
        loss = loss_cd(oracle, oracle, oracle, schedule, plan, direction, x0, y, g)
        assert 0 <= loss.item() <= 1e-12


def test_loss_cd_nonnegative_and_only_online_gets_gradient(schedule, plan):
    x0, y = small_batch(4, 3)
    online = build_model(Arch(), "forward", 0)
    ema = copy.deepcopy(online).requires_grad_(False)
    solver = build_model(Arch(), "student", 1).requires_grad_(False)
    for direction in (FORWARD, BACKWARD):
        loss = loss_cd(online, ema, solver, schedule, plan, direction, x0, y, torch.Generator().manual_seed(1))
        assert loss.item() >= 0
        loss.backward()
    assert all(p.grad is None for p in solver.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in online.parameters())


def test_loss_preserve_zero_for_mutual_inverses(schedule, plan):
    x0, y = small_batch(4, 4)
    x0 = x0.double()
    oracle = TrajectoryOracle(x0, schedule)
    for direction in (FORWARD, BACKWARD):
        loss = loss_preserve(oracle, oracle, schedule, plan, direction, x0, y, torch.Generator().manual_seed(2))
        assert 0 <= loss.item() <= 1e-12


def test_loss_preserve_nonnegative(model, schedule, plan):
    x0, y = small_batch(4, 5)
    with torch.no_grad():
        for d in (FORWARD, BACKWARD):
            assert loss_preserve(model, model, schedule, plan, d, x0, y, torch.Generator().manual_seed(0)) >= 0


def test_train_icd_is_deterministic(schedule, plan):
    x, y = small_batch(16, 6)
    student = build_model(Arch(), "student", 3)
    cfg = ICDConfig(steps=2, batch=4)
    a = train_icd(student, x, y, schedule, plan, cfg, seed=9)
    b = train_icd(student, x, y, schedule, plan, cfg, seed=9)
    for m1, m2 in ((a.forward, b.forward), (a.backward, b.backward)):
        for v1, v2 in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert v1.numpy().tobytes() == v2.numpy().tobytes()


def test_multistep_degenerate_plan_single_evaluation(model, schedule):
    one = SegmentPlan((0, 64))
    z = torch.randn(2, 1, 16, 16)
    model.n_evals = 0
    out = multistep_sample(model, schedule, one, z, 1, [0.0], seed=0)
    assert model.n_evals == 1
    with torch.no_grad():
        eps, x0 = model.predict(z, 64, 1)
        assert torch.equal(out, ddim_jump(schedule, z, eps, x0, 64, 0))


def test_multistep_renoising_depends_on_seed(model, schedule, plan):
    z = torch.randn(2, 1, 16, 16)
    a = multistep_sample(model, schedule, plan, z, 1, [0.0] * 4, seed=0)
    b = multistep_sample(model, schedule, plan, z, 1, [0.0] * 4, seed=1)
    c = multistep_sample(model, schedule, plan, z, 1, [0.0] * 4, seed=0)
    assert not torch.equal(a, b) and torch.equal(a, c)


# ---------------------------------------------------------------- trained models


def _probe(run, n=64, seed=21):
    xv, yv = run.holdout_data()
    return xv[:n], yv[:n], torch.Generator().manual_seed(seed)


@pytest.mark.slow
def test_consistency_loss_drops_with_training(toy_run):
    x0, y, _ = _probe(toy_run)
    student = toy_run.load("student.iccm", "student")
    fwd, bwd = toy_run.pair(finetuned=False)
    rand = build_model(toy_run.arch, "forward", 123)

    def cd(m, direction):
        with torch.no_grad():
            return sum(loss_cd(m, m, student, toy_run.schedule, toy_run.plan, direction, x0, y,
                               torch.Generator().manual_seed(k)).item() for k in range(4))

    assert cd(fwd, FORWARD) < cd(rand, FORWARD)
    assert cd(bwd, BACKWARD) < cd(rand, BACKWARD)


@pytest.mark.slow
def test_forward_preservation_halves(toy_run):
    x0, y, _ = _probe(toy_run)
    student = toy_run.load("student.iccm", "student")
    init = init_pair(student, toy_run.plan)
    fwd, bwd = toy_run.pair(finetuned=False)

    def lf(f, b):
        with torch.no_grad():
            return sum(loss_preserve(f, b, toy_run.schedule, toy_run.plan, FORWARD, x0, y,
                                     torch.Generator().manual_seed(k)).item() for k in range(4))

    assert lf(fwd, bwd) < 0.5 * lf(init.forward, init.backward)


@pytest.mark.slow
def test_segment_round_trip_on_teacher_trajectory(toy_run):
    x0, y, g = _probe(toy_run)
    teacher = toy_run.load("teacher.iccm", "teacher")
    fwd, bwd = toy_run.pair(finetuned=False)
    s, p = toy_run.schedule, toy_run.plan
    errs = []
    with torch.no_grad():
        z = x0
        for k in range(p.n_segments):
            lo, hi = p.boundaries[k], p.boundaries[k + 1]
            if k:
                z = ddim_solve(teacher, s, z, p.boundaries[k - 1], lo, lo - p.boundaries[k - 1], y, 0.0)
            up = cm_apply(fwd, s, z, lo, y, 0.0, FORWARD, p)
            back = cm_apply(bwd, s, up, hi, y, 0.0, BACKWARD, p)
            errs.append((back - z).pow(2).mean().item())
    assert max(errs) <= 5e-3


@pytest.mark.slow
def test_four_step_samples_are_classifiable(toy_run):
    from icedit.pipeline import classifier

    clf = classifier(toy_run)
    _, bwd = toy_run.pair(finetuned=False)
    z = torch.randn(128, 1, 16, 16, generator=torch.Generator().manual_seed(8))
    y = torch.arange(128) % 8
    xs = multistep_sample(bwd, toy_run.schedule, toy_run.plan, z, y, [2.0] * 4, seed=1)
    assert (clf.predict_label(xs) == y).float().mean().item() >= 0.80


@pytest.mark.slow
def test_pre_finetune_reconstruction(toy_run):
    from icedit.cyclefit import reconstruct

    xv, yv = toy_run.holdout_data()
    fwd, bwd = toy_run.pair(finetuned=False)
    with torch.no_grad():
        xr = reconstruct(fwd, bwd, toy_run.schedule, xv[:256], yv[:256], toy_run.plan)
    assert (xr - xv[:256]).pow(2).mean().item() <= 5e-2


def test_oracle_walks_the_exact_trajectory(schedule, plan):
    x0, y = small_batch(2, 7)
    x0 = x0.double()
    oracle = TrajectoryOracle(x0, schedule)
    eps = torch.randn(x0.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    z = add_noise(schedule, x0, 20, eps)
    up = cm_apply(oracle, schedule, z, 20, y, 0.0, FORWARD, plan)
    assert torch.allclose(up, add_noise(schedule, x0, 32, eps))
    down = cm_apply(oracle, schedule, up, 32, y, 0.0, BACKWARD, plan)
    assert torch.allclose(cm_apply(oracle, schedule, down, 16, y, 0.0, BACKWARD, plan), x0, atol=1e-9)
