"""Cycle-consistency fine-tuning of the forward consistency model.

The loss runs the whole 4-step inversion and 4-step generation and compares
the result with the input under a fixed random-feature perceptual distance.
Only the forward model (or its adapter) is updated; the backward model is
frozen for the entire run.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .denoiser import Denoiser
from .diffusion import NoiseSchedule
from .icd import FORWARD, ConsistencyPair, SegmentPlan, cm_to, ema_update, loss_cd, loss_preserve
from .numcore import AdamState, adam_step, backward, trainable

log = logging.getLogger(__name__)


class PerceptualNet(nn.Module):
    """Frozen pyramid of random orthogonal 3x3 convolutions.

    Each stage is conv -> SiLU; the stage output is compared after per-pixel
    channel normalisation (as in LPIPS) and then average-pooled into the next
    stage. ``stage_weights`` are fixed constants that put the stages on a
    comparable footing (mean squared difference of unit vectors is bounded
    by 4 at every stage).
    """

    def __init__(self, channels: tuple[int, ...] = (1, 16, 32, 48), seed: int = 1234, patch_grid: int = 1):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        convs = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            w = torch.empty(cout, cin * 9)
            nn.init.orthogonal_(w, generator=g)
            conv.weight.data.copy_(w.reshape(cout, cin, 3, 3) * 3.0)
            conv.bias.data.copy_(torch.rand(cout, generator=g) * 0.2 - 0.1)
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        self.stage_weights = tuple(1.0 for _ in convs)
        self.patch_grid = patch_grid
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for i, conv in enumerate(self.convs):
            h = F.silu(conv(h))
            feats.append(h / torch.sqrt(h.pow(2).sum(dim=1, keepdim=True) + 1e-10))
            if i < len(self.convs) - 1:
                h = F.avg_pool2d(h, 2)
        return feats

    def patches(self, x: Tensor) -> Tensor:
        """Non-overlapping ``patch_grid`` x ``patch_grid`` tiles stacked along the batch axis."""
        g = self.patch_grid
        if g == 1:
            return x
        b, c, h, w = x.shape
        if h % g or w % g:
            raise ValueError(f"image {h}x{w} not divisible into a {g}x{g} grid")
        ph, pw = h // g, w // g
        x = x.reshape(b, c, g, ph, g, pw).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b * g * g, c, ph, pw)

    def per_sample(self, x: Tensor, y: Tensor) -> Tensor:
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
        b = x.shape[0]
        fx = self.features(self.patches(x))
        fy = self.features(self.patches(y))
        d = 0.0
        for w, a, c in zip(self.stage_weights, fx, fy):
            d = d + w * (a - c).pow(2).sum(dim=1).mean(dim=(1, 2))
        return d.reshape(b, -1).mean(dim=1)

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        return self.per_sample(x, y).mean()


def perceptual_distance(net: PerceptualNet, x: Tensor, y: Tensor) -> Tensor:
    return net(x, y)


def f_forward(fwd: Denoiser, schedule: NoiseSchedule, x0: Tensor, label, plan: SegmentPlan,
              t_start: int = 0) -> tuple[Tensor, list[Tensor]]:
    """Invert with the forward model (CFG off): one jump per segment up to T. Returns (z_T, [z*_1..z*_K])."""
    b = plan.boundaries
    z = x0  # identity codec
    latents = []
    zeros = torch.zeros(x0.shape[0], dtype=x0.dtype)
    for k in range(plan.n_segments):
        t_from = t_start if k == 0 else b[k]
        z = cm_to(fwd, schedule, z, t_from, b[k + 1], label, zeros)
        latents.append(z)
    return z, latents


def g_backward(bwd: Denoiser, schedule: NoiseSchedule, z: Tensor, label, plan: SegmentPlan,
               omega_schedule=None) -> Tensor:
    """Deterministic generation with the backward model, one jump per segment down to 0."""
    b = plan.boundaries
    n = plan.n_segments
    omega_schedule = [0.0] * n if omega_schedule is None else list(omega_schedule)
    if len(omega_schedule) != n:
        raise ValueError("omega schedule length must equal the segment count")
    for i, k in enumerate(range(n, 0, -1)):
        w = torch.full((z.shape[0],), float(omega_schedule[i]), dtype=z.dtype)
        z = cm_to(bwd, schedule, z, b[k], b[k - 1], label, w)
    return z


def reconstruct(fwd: Denoiser, bwd: Denoiser, schedule: NoiseSchedule, x0: Tensor, label, plan: SegmentPlan,
                t_start: int = 0) -> Tensor:
    z, _ = f_forward(fwd, schedule, x0, label, plan, t_start)
    return g_backward(bwd, schedule, z, label, plan)


def _assert_frozen(model: Denoiser) -> None:
    live = [n for n, p in model.named_parameters() if p.requires_grad]
    if live:
        raise AssertionError(f"backward model has trainable parameters: {live[:3]}")


def loss_rec(fwd: Denoiser, bwd: Denoiser, schedule: NoiseSchedule, x0: Tensor, label, plan: SegmentPlan,
             percept: PerceptualNet | None = None, mode: str = "lpips", t_start: int = 0) -> Tensor:
    """Distance between x0 and G(F(x0)); the gradient can only reach the forward model."""
    _assert_frozen(bwd)
    x_hat = reconstruct(fwd, bwd, schedule, x0, label, plan, t_start)
    if mode == "lpips":
        return percept(x_hat, x0)
    if mode == "l2":
        return F.mse_loss(x_hat, x0)
    if mode == "huber":
        return F.smooth_l1_loss(x_hat, x0, beta=0.1)
    raise ValueError(f"unknown reconstruction loss {mode!r}")


@dataclass
class CycleConfig:
    iterations: int = 3000
    batch: int = 16
    lr: float = 1e-5
    lambda_rec: float = 1.0
    lambda_f: float = 1.5
    lambda_cd: float = 1.0
    adapter_rank: int = 8
    rec_loss: str = "lpips"
    patch_grid: int = 1
    noise_t: int = 0
    solver_skip: int = 4
    start_offset: int = 1

    def __post_init__(self):
        if min(self.lambda_rec, self.lambda_f, self.lambda_cd) < 0:
            raise ValueError("loss weights must be >= 0")


def finetune_cycle(pair: ConsistencyPair, solver: Denoiser, x: Tensor, y: Tensor, schedule: NoiseSchedule,
                   cfg: CycleConfig, seed: int, percept: PerceptualNet | None = None,
                   log_every: int = 250) -> ConsistencyPair:
    """Fine-tune the forward model on λ_rec L_rec + λ_cd L_CD + λ_f L_f, CFG off, backward model frozen."""
    percept = percept or PerceptualNet(patch_grid=cfg.patch_grid)
    fwd = copy.deepcopy(pair.forward)
    fwd.role = "forward"
    if cfg.adapter_rank:
        if not fwd.has_adapter:
            fwd.attach_adapter(cfg.adapter_rank, generator=torch.Generator().manual_seed(seed + 29))
        fwd.set_adapter_trainable()
    else:
        for p in fwd.parameters():
            p.requires_grad_(True)
    ema = copy.deepcopy(fwd)
    ema.role = "forward_ema"
    for p in ema.parameters():
        p.requires_grad_(False)
    bwd = pair.backward
    for p in bwd.parameters():
        p.requires_grad_(False)
    for p in solver.parameters():
        p.requires_grad_(False)

    g = torch.Generator().manual_seed(seed)
    opt = AdamState(trainable(fwd), lr=cfg.lr)
    n = x.shape[0]
    plan = pair.plan
    for it in range(cfg.iterations):
        idx = torch.randint(0, n, (cfg.batch,), generator=g)
        x0, lab = x[idx], y[idx]
        l_rec = loss_rec(fwd, bwd, schedule, x0, lab, plan, percept, cfg.rec_loss, cfg.noise_t)
        total = cfg.lambda_rec * l_rec
        if cfg.lambda_cd:
            l_cd = loss_cd(fwd, ema, solver, schedule, plan, FORWARD, x0, lab, g,
                           solver_skip=cfg.solver_skip, start_offset=cfg.start_offset)
            total = total + cfg.lambda_cd * l_cd
        if cfg.lambda_f:
            l_f = loss_preserve(fwd, bwd, schedule, plan, FORWARD, x0, lab, g, cfg.start_offset)
            total = total + cfg.lambda_f * l_f
        adam_step(opt, backward(total, opt.params))
        ema_update(ema, fwd, pair.ema_decay)
        if log_every and it % log_every == 0:
            log.info("cycle it %d  total %.5f  rec %.5f", it, total.item(), l_rec.item())
    fwd.eval()
    for p in fwd.parameters():
        p.requires_grad_(False)
    return ConsistencyPair(fwd, bwd, ema, pair.backward_ema, plan, pair.ema_decay)
