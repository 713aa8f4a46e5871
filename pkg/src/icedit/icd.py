"""Invertible consistency distillation over a segmented trajectory.

The forward model maps a point inside a segment to the segment's upper
boundary (toward noise); the backward model maps it to the lower boundary
(toward data). Both are single DDIM jumps driven by one network evaluation.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import torch
from torch import Tensor

from .denoiser import Denoiser
from .diffusion import NoiseSchedule, add_noise, ddim_jump, ddim_step, guided_eps, sample_omega
from .numcore import AdamState, adam_step, backward, trainable

log = logging.getLogger(__name__)

FORWARD = "forward"
BACKWARD = "backward"


@dataclass(frozen=True)
class SegmentPlan:
    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b[:-1], b[1:])):
            raise ValueError(f"boundaries must start at 0 and ascend strictly: {b}")

    @classmethod
    def uniform(cls, T: int = 64, segments: int = 4) -> "SegmentPlan":
        return cls(tuple(round(i * T / segments) for i in range(segments + 1)))

    @property
    def T(self) -> int:
        return self.boundaries[-1]

    @property
    def n_segments(self) -> int:
        return len(self.boundaries) - 1

    def tensor(self) -> Tensor:
        return torch.tensor(self.boundaries, dtype=torch.long)


def segment_of(t: int, plan: SegmentPlan) -> tuple[int, int, int]:
    """Segment index and bounds; a boundary belongs to the segment it starts, T to the last one."""
    if not 0 <= t <= plan.T:
        raise ValueError(f"timestep {t} outside [0, {plan.T}]")
    b = plan.boundaries
    k = min(sum(1 for x in b[1:] if x <= t), plan.n_segments - 1)
    return k, b[k], b[k + 1]


def boundary_target(t: Tensor, plan: SegmentPlan, direction: str) -> Tensor:
    """Per-sample destination boundary.

    Forward jumps to the upper bound of ``segment_of(t)``. Backward jumps to
    the lower bound, except that a point sitting exactly on an interior
    boundary is taken down one full segment (it is the end of the segment
    below, not a fixed point).
    """
    b = plan.tensor()
    k = (torch.bucketize(t.contiguous(), b, right=True) - 1).clamp(0, plan.n_segments - 1)
    if direction == FORWARD:
        return b[k + 1]
    if direction == BACKWARD:
        on_edge = (b[k] == t) & (t > 0)
        return torch.where(on_edge, b[(k - 1).clamp(min=0)], b[k])
    raise ValueError(f"unknown direction {direction!r}")


def cm_to(model: Denoiser, schedule: NoiseSchedule, z: Tensor, t, t_to, label, omega=0.0) -> Tensor:
    """One network evaluation followed by one DDIM jump ``t -> t_to``."""
    eps, x0 = model.predict(z, t, label, omega)
    return ddim_jump(schedule, z, eps, x0, t, t_to)


def cm_apply(model: Denoiser, schedule: NoiseSchedule, z: Tensor, t, label, omega, direction: str,
             plan: SegmentPlan) -> Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(z.shape[0])
    if t.min() < 0 or t.max() > plan.T:
        raise ValueError("timestep out of range")
    return cm_to(model, schedule, z, t, boundary_target(t, plan, direction), label, omega)


@dataclass
class ConsistencyPair:
    forward: Denoiser
    backward: Denoiser
    forward_ema: Denoiser
    backward_ema: Denoiser
    plan: SegmentPlan
    ema_decay: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("EMA decay must lie in (0, 1)")


@dataclass
class ICDConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 1e-4
    lambda_f: float = 1.5
    lambda_r: float = 1.5
    ema_decay: float = 0.95
    solver_skip: int = 4
    start_offset: int = 1
    omega_max: float = 19.0
    adapter_rank: int = 0


def _sample_segment_times(plan: SegmentPlan, direction: str, b: int, start_offset: int,
                          g: torch.Generator) -> tuple[Tensor, Tensor]:
    """Random (t_n, segment index) pairs; forward times in [lo, hi), backward times in (lo, hi]."""
    bounds = plan.tensor()
    k = torch.randint(0, plan.n_segments, (b,), generator=g)
    lo, hi = bounds[k], bounds[k + 1]
    if direction == FORWARD:
        lo = torch.where(k == 0, torch.clamp(lo, min=start_offset), lo)
        u = torch.rand(b, generator=g, dtype=torch.float64)
        t = lo + (u * (hi - lo).double()).floor().long()
        t = torch.minimum(t, hi - 1)
    else:
        u = torch.rand(b, generator=g, dtype=torch.float64)
        t = lo + 1 + (u * (hi - lo).double()).floor().long()
        t = torch.minimum(t, hi)
    return t, k


def loss_cd(online: Denoiser, ema: Denoiser, solver: Denoiser, schedule: NoiseSchedule, plan: SegmentPlan,
            direction: str, x0: Tensor, label: Tensor, g: torch.Generator, omega: Tensor | None = None,
            solver_skip: int = 4, start_offset: int = 1) -> Tensor:
    """Consistency distillation loss toward the segment boundary in ``direction``.

    The teacher (``solver``) takes one DDIM step of ``solver_skip`` timesteps
    toward the boundary; the online map at t_n is matched (squared L2, mean
    over elements) against the EMA map at the solver's output. Only the
    online branch carries gradient.
    """
    b = x0.shape[0]
    if omega is None:
        omega = torch.zeros(b)
    t_n, k = _sample_segment_times(plan, direction, b, start_offset, g)
    bounds = plan.tensor()
    if direction == FORWARD:
        target_t = bounds[k + 1]
        t_m = torch.minimum(t_n + solver_skip, target_t)
    else:
        target_t = bounds[k]
        t_m = torch.maximum(t_n - solver_skip, target_t)
    eps = torch.randn(x0.shape, generator=g)
    z_n = add_noise(schedule, x0, t_n, eps)
    with torch.no_grad():
        z_m = ddim_step(schedule, z_n, guided_eps(solver, z_n, t_n, label, omega), t_n, t_m)
        target = cm_to(ema, schedule, z_m, t_m, target_t, label, omega)
    pred = cm_to(online, schedule, z_n, t_n, target_t, label, omega)
    return (pred - target).pow(2).mean()


def loss_preserve(fwd: Denoiser, bwd: Denoiser, schedule: NoiseSchedule, plan: SegmentPlan, direction: str,
                  x0: Tensor, label: Tensor, g: torch.Generator, start_offset: int = 1) -> Tensor:
    """Segment round-trip consistency.

    ``forward`` (L_f): start at a segment's lower boundary, jump up with the
    forward model, come back with the backward model, compare to the start.
    ``backward`` (L_r): the mirror image, starting at the upper boundary.
    In both directions the first segment's lower end is ``start_offset``
    rather than 0: at t = 0 the noise is undetermined, so no forward model
    can be an exact inverse there.
    Callers choose which model's parameters receive the gradient.
    """
    b = x0.shape[0]
    bounds = plan.tensor()
    k = torch.randint(0, plan.n_segments, (b,), generator=g)
    lo, hi = bounds[k], bounds[k + 1]
    eps = torch.randn(x0.shape, generator=g)
    zeros = torch.zeros(b)
    if direction == FORWARD:
        start = torch.where(k == 0, torch.clamp(lo, min=start_offset), lo)
        z_s = add_noise(schedule, x0, start, eps)
        anchor = add_noise(schedule, x0, lo, eps)
        up = cm_to(fwd, schedule, z_s, start, hi, label, zeros)
        back = cm_to(bwd, schedule, up, hi, lo, label, zeros)
        return (back - anchor).pow(2).mean()
    if direction == BACKWARD:
        lo = torch.where(k == 0, torch.clamp(lo, min=start_offset), lo)
        z_s = add_noise(schedule, x0, hi, eps)
        down = cm_to(bwd, schedule, z_s, hi, lo, label, zeros)
        back = cm_to(fwd, schedule, down, lo, hi, label, zeros)
        return (back - z_s).pow(2).mean()
    raise ValueError(direction)


@torch.no_grad()
def ema_update(ema: Denoiser, online: Denoiser, decay: float) -> None:
    for pe, po in zip(ema.parameters(), online.parameters()):
        pe.mul_(decay).add_(po.detach(), alpha=1 - decay)


def init_pair(base: Denoiser, plan: SegmentPlan, ema_decay: float = 0.95) -> ConsistencyPair:
    """Both consistency models start from the (guidance-distilled) base weights."""
    models = []
    for role in ("forward", "backward"):
        m = copy.deepcopy(base)
        m.role = role
        m.n_evals = 0
        for p in m.parameters():
            p.requires_grad_(True)
        models.append(m)
    f, b = models
    fe, be = copy.deepcopy(f), copy.deepcopy(b)
    for m in (fe, be):
        m.role += "_ema"
        for p in m.parameters():
            p.requires_grad_(False)
    return ConsistencyPair(f, b, fe, be, plan, ema_decay)


def train_icd(solver: Denoiser, x: Tensor, y: Tensor, schedule: NoiseSchedule, plan: SegmentPlan,
              cfg: ICDConfig, seed: int, log_every: int = 250) -> ConsistencyPair:
    """Alternating updates: forward model on L_CD + λ_f L_f, then backward model on L_CD + λ_r L_r."""
    pair = init_pair(solver, plan, cfg.ema_decay)
    if cfg.adapter_rank:
        gen = torch.Generator().manual_seed(seed + 17)
        for m in (pair.forward, pair.backward):
            m.attach_adapter(cfg.adapter_rank, generator=gen)
        pair.forward_ema = _frozen_copy(pair.forward, "forward_ema")
        pair.backward_ema = _frozen_copy(pair.backward, "backward_ema")
    g = torch.Generator().manual_seed(seed)
    opt_f = AdamState(trainable(pair.forward), lr=cfg.lr)
    opt_b = AdamState(trainable(pair.backward), lr=cfg.lr)
    n = x.shape[0]
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch,), generator=g)
        x0, lab = x[idx], y[idx]

        l_cd_f = loss_cd(pair.forward, pair.forward_ema, solver, schedule, plan, FORWARD, x0, lab, g,
                         solver_skip=cfg.solver_skip, start_offset=cfg.start_offset)
        l_f = loss_preserve(pair.forward, pair.backward, schedule, plan, FORWARD, x0, lab, g, cfg.start_offset)
        adam_step(opt_f, backward(l_cd_f + cfg.lambda_f * l_f, opt_f.params))

        w = sample_omega(cfg.batch, cfg.omega_max, g)
        l_cd_b = loss_cd(pair.backward, pair.backward_ema, solver, schedule, plan, BACKWARD, x0, lab, g,
                         omega=w, solver_skip=cfg.solver_skip, start_offset=cfg.start_offset)
        l_r = loss_preserve(pair.forward, pair.backward, schedule, plan, BACKWARD, x0, lab, g, cfg.start_offset)
        adam_step(opt_b, backward(l_cd_b + cfg.lambda_r * l_r, opt_b.params))

        ema_update(pair.forward_ema, pair.forward, cfg.ema_decay)
        ema_update(pair.backward_ema, pair.backward, cfg.ema_decay)
        if log_every and step % log_every == 0:
            log.info("icd step %d  cd_f %.5f  L_f %.5f  cd_b %.5f  L_r %.5f", step, l_cd_f.item(), l_f.item(),
                     l_cd_b.item(), l_r.item())
    for m in (pair.forward, pair.backward):
        m.eval()
    return pair


def _frozen_copy(m: Denoiser, role: str) -> Denoiser:
    c = copy.deepcopy(m)
    c.role = role
    for p in c.parameters():
        p.requires_grad_(False)
    return c


@torch.no_grad()
def multistep_sample(model: Denoiser, schedule: NoiseSchedule, plan: SegmentPlan, z_T: Tensor, label,
                     omega_schedule, seed: int) -> Tensor:
    """Backward-model sampling from the top boundary with fresh noise injected at every interior boundary."""
    g = torch.Generator().manual_seed(seed)
    b = plan.boundaries
    z = z_T
    steps = plan.n_segments
    if len(omega_schedule) != steps:
        raise ValueError("omega schedule length must equal the segment count")
    for i, k in enumerate(range(steps - 1, -1, -1)):
        t_hi, t_lo = b[k + 1], b[k]
        eps, x0_hat = model.predict(z, t_hi, label, float(omega_schedule[i]))
        if k == 0:
            z = ddim_jump(schedule, z, eps, x0_hat, t_hi, t_lo)
        else:
            z = add_noise(schedule, x0_hat, t_lo, torch.randn(z.shape, generator=g))
    return z
