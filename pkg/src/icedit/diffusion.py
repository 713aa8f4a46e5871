"""Variance-preserving schedule, DDIM stepping, CFG, and the teacher/student training loops."""

from __future__ import annotations

import copy
import logging
import math

import torch
from torch import Tensor

from .denoiser import NULL_LABEL, Arch, Denoiser, build_model
from .schedule import NoiseSchedule, make_schedule
from .numcore import AdamState, adam_step, backward, trainable

log = logging.getLogger(__name__)


def add_noise(schedule: NoiseSchedule, z0: Tensor, t, eps: Tensor) -> Tensor:
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    a, s = schedule.coef(t, z0)
    return a * z0 + s * eps


def ddim_step(schedule: NoiseSchedule, z: Tensor, eps_hat: Tensor, t_from, t_to) -> Tensor:
    """Deterministic DDIM move between any two timesteps (t_to > t_from inverts).

    Samples with t_to == t_from are returned untouched.
    """
    a0, s0 = schedule.coef(t_from, z)
    a1, s1 = schedule.coef(t_to, z)
    x0_hat = (z - s0 * eps_hat) / a0
    out = a1 * x0_hat + s1 * eps_hat
    same = torch.as_tensor(t_from) == torch.as_tensor(t_to)
    if same.dim() == 0:
        return z if bool(same) else out
    return torch.where(same.reshape((-1,) + (1,) * (z.dim() - 1)), z, out)


def ddim_jump(schedule: NoiseSchedule, z: Tensor, eps_hat: Tensor, x0_hat: Tensor, t_from, t_to) -> Tensor:
    """DDIM move from a paired (eps, x0) prediction; equals ``ddim_step`` in exact arithmetic.

    Near t = T, alpha is tiny and ``(z - sigma*eps)/alpha`` cancels almost
    every significant digit. Taking x0 from the network's v output does not.
    """
    a1, s1 = schedule.coef(t_to, z)
    out = a1 * x0_hat + s1 * eps_hat
    same = torch.as_tensor(t_from) == torch.as_tensor(t_to)
    if same.dim() == 0:
        return z if bool(same) else out
    return torch.where(same.reshape((-1,) + (1,) * (z.dim() - 1)), z, out)


def predict_x0(schedule: NoiseSchedule, z: Tensor, eps_hat: Tensor, t) -> Tensor:
    a, s = schedule.coef(t, z)
    return (z - s * eps_hat) / a


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, omega) -> Tensor:
    """eps(null) + (1 + w) * (eps(y) - eps(null)), arranged so w=0 and w=-1 are exact."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("shape mismatch in cfg_combine")
    w = torch.as_tensor(omega, dtype=eps_cond.dtype)
    if w.dim() == 1:
        w = w.reshape((-1,) + (1,) * (eps_cond.dim() - 1))
    return (1 + w) * eps_cond - w * eps_uncond


def guided_eps(model: Denoiser, z: Tensor, t, label, omega) -> Tensor:
    """Noise prediction at guidance scale ``omega``.

    The teacher needs two passes (conditional and null); any ω-conditioned
    model does it in one.
    """
    if model.role == "teacher":
        b = z.shape[0]
        e_c = model.eps(z, t, label)
        e_u = model.eps(z, t, torch.full((b,), NULL_LABEL, dtype=torch.long))
        return cfg_combine(e_u, e_c, omega)
    return model.eps(z, t, label, omega)


def timestep_grid(t_from: int, t_to: int, n_steps: int) -> list[int]:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return [int(round(v)) for v in torch.linspace(t_from, t_to, n_steps + 1, dtype=torch.float64).tolist()]


def ddim_solve(model: Denoiser, schedule: NoiseSchedule, z: Tensor, t_from: int, t_to: int,
               n_steps: int, label, omega=0.0) -> Tensor:
    grid = timestep_grid(t_from, t_to, n_steps)
    for a, b in zip(grid[:-1], grid[1:]):
        z = ddim_step(schedule, z, guided_eps(model, z, a, label, omega), a, b)
    return z


# --------------------------------------------------------------------------
# training loops


def _batch(x: Tensor, y: Tensor, n: int, g: torch.Generator) -> tuple[Tensor, Tensor]:
    idx = torch.randint(0, x.shape[0], (n,), generator=g)
    return x[idx], y[idx]


def teacher_loss(model: Denoiser, schedule: NoiseSchedule, x0: Tensor, y: Tensor, g: torch.Generator,
                 p_null: float = 0.1) -> Tensor:
    b = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=g)
    eps = torch.randn(x0.shape, generator=g)
    drop = torch.rand(b, generator=g) < p_null
    y = torch.where(drop, torch.full_like(y, NULL_LABEL), y)
    zt = add_noise(schedule, x0, t, eps)
    return eps_loss(model.eps(zt, t, y), eps, schedule, t)


def eps_loss(eps_hat: Tensor, eps: Tensor, schedule: NoiseSchedule, t: Tensor) -> Tensor:
    """Noise-prediction error weighted by 1/alpha_t^2, i.e. the MSE of the implied v-prediction."""
    a, _ = schedule.coef(t, eps)
    return ((eps_hat - eps) / a).pow(2).mean()


def train_teacher(x: Tensor, y: Tensor, schedule: NoiseSchedule, steps: int, seed: int, arch: Arch = Arch(),
                  batch: int = 32, lr: float = 1e-4, p_null: float = 0.1, log_every: int = 500) -> Denoiser:
    """Fit eps_psi(alpha_t x0 + sigma_t eps, t, y) to eps (v-weighted) with label dropout to null."""
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    model = build_model(arch, "teacher", seed)
    g = torch.Generator().manual_seed(seed)
    opt = AdamState(trainable(model), lr=lr)
    for step in range(steps):
        x0, yb = _batch(x, y, batch, g)
        loss = teacher_loss(model, schedule, x0, yb, g, p_null)
        adam_step(opt, backward(loss, opt.params))
        if log_every and step % log_every == 0:
            log.info("teacher step %d loss %.5f", step, loss.item())
    model.eval()
    return model


def sample_omega(n: int, omega_max: float, g: torch.Generator) -> Tensor:
    """log(1 + w) uniform on [0, log(1 + omega_max)]."""
    u = torch.rand(n, generator=g, dtype=torch.float64)
    return (torch.exp(u * math.log1p(omega_max)) - 1.0).to(torch.float32)


def distill_w(teacher: Denoiser, x: Tensor, y: Tensor, schedule: NoiseSchedule, steps: int, seed: int,
              omega_max: float = 19.0, batch: int = 32, lr: float = 1e-4, log_every: int = 500) -> Denoiser:
    """Train a single-pass ω-conditioned student to match the teacher's two-pass CFG output."""
    student = copy.deepcopy(teacher)
    student.role = "student"
    student.n_evals = 0
    for p in student.parameters():
        p.requires_grad_(True)
    g = torch.Generator().manual_seed(seed)
    opt = AdamState(trainable(student), lr=lr)
    for step in range(steps):
        x0, yb = _batch(x, y, batch, g)
        t = torch.randint(1, schedule.T + 1, (batch,), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        w = sample_omega(batch, omega_max, g)
        zt = add_noise(schedule, x0, t, eps)
        with torch.no_grad():
            target = guided_eps(teacher, zt, t, yb, w)
        loss = eps_loss(student.eps(zt, t, yb, w), target, schedule, t)
        adam_step(opt, backward(loss, opt.params))
        if log_every and step % log_every == 0:
            log.info("distill-w step %d loss %.5f", step, loss.item())
    student.eval()
    return student
