"""Noise-prediction network shared by the teacher and both consistency models.

Layout (16x16 input):

    stem conv -> res block @16 -> strided conv -> res block @8
      -> self-attention (2 heads, 64 tokens) -> res block @8
      -> up block 1 @8 (skip) -> nearest x2 -> up block 2 @16 (skip) -> head

The two up blocks are the feature hooks; the attention block exposes its
row-stochastic maps. Hooks are only collected when asked for.

The head predicts v = alpha_t * eps - sigma_t * x0 and the forward pass
returns eps_hat = alpha_t * v_hat + sigma_t * z. The schedule clips alpha_T
to 1e-4, so a raw eps head would make x0_hat = (z - sigma eps_hat) / alpha
blow up near T; through v the same quantity is alpha z - sigma v_hat.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .schedule import make_schedule

NULL_LABEL = 8
N_CONDITIONS = 9


@dataclass(frozen=True)
class Arch:
    image_size: int = 16
    in_channels: int = 1
    width: int = 64  # embedding width = t_dim + label_dim + omega_dim
    t_dim: int = 32
    label_dim: int = 16
    omega_dim: int = 16
    ch_hi: int = 16  # channels at full resolution
    ch_lo: int = 48  # channels at half resolution
    heads: int = 2
    groups: int = 8
    T: int = 64
    omega_freqs: int = 4

    def __post_init__(self):
        if self.t_dim + self.label_dim + self.omega_dim != self.width:
            raise ValueError("width must equal t_dim + label_dim + omega_dim")
        if self.ch_lo % self.heads:
            raise ValueError("ch_lo must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HookBundle:
    attn: list[Tensor] = field(default_factory=list)  # per layer: (B, heads, N, N)
    feats: list[Tensor] = field(default_factory=list)  # per up block: (B, C, H, W)


def sinusoidal(t: Tensor, dim: int) -> Tensor:
    """Standard transformer position code: [sin(t w_i), cos(t w_i)], w_i = 10000^(-i/half)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class LoRALinear(nn.Module):
    """Frozen dense layer plus a trainable rank-r update ``up @ down``."""

    def __init__(self, host: nn.Linear, rank: int, generator: torch.Generator | None = None):
        super().__init__()
        if rank < 1 or rank > min(host.in_features, host.out_features):
            raise ValueError(f"rank {rank} invalid for {host.in_features}x{host.out_features} layer")
        self.host = host
        for p in self.host.parameters():
            p.requires_grad_(False)
        self.rank = rank
        down = torch.empty(rank, host.in_features, dtype=host.weight.dtype)
        nn.init.kaiming_uniform_(down, a=math.sqrt(5), generator=generator)
        self.down = nn.Parameter(down)
        self.up = nn.Parameter(torch.zeros(host.out_features, rank, dtype=host.weight.dtype))

    def forward(self, x: Tensor) -> Tensor:
        return self.host(x) + F.linear(F.linear(x, self.down), self.up)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(min(groups, ch), ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.out = nn.Linear(ch, ch)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b, c, hh, ww = x.shape
        tok = self.norm(x).flatten(2).transpose(1, 2)  # (B, N, C)
        q, k, v = self.qkv(tok).chunk(3, dim=-1)
        d = c // self.heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, -1, self.heads, d).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, -1, c)
        y = self.out(y).transpose(1, 2).reshape(b, c, hh, ww)
        return x + y, attn


class Denoiser(nn.Module):
    def __init__(self, arch: Arch = Arch(), role: str = "teacher"):
        super().__init__()
        self.arch = arch
        self.role = role
        a = arch
        self.label_emb = nn.Embedding(N_CONDITIONS, a.label_dim)
        self.omega_mlp = nn.Sequential(
            nn.Linear(2 * a.omega_freqs, a.omega_dim), nn.SiLU(), nn.Linear(a.omega_dim, a.omega_dim)
        )
        self.emb_mlp = nn.Sequential(nn.Linear(a.width, a.width), nn.SiLU(), nn.Linear(a.width, a.width))
        self.stem = nn.Conv2d(a.in_channels, a.ch_hi, 3, padding=1)
        self.res_hi = ResBlock(a.ch_hi, a.ch_hi, a.width, a.groups)
        self.down = nn.Conv2d(a.ch_hi, a.ch_lo, 3, stride=2, padding=1)
        self.res_lo1 = ResBlock(a.ch_lo, a.ch_lo, a.width, a.groups)
        self.attn = SelfAttention(a.ch_lo, a.heads, a.groups)
        self.res_lo2 = ResBlock(a.ch_lo, a.ch_lo, a.width, a.groups)
        self.up1 = ResBlock(2 * a.ch_lo, a.ch_lo, a.width, a.groups)
        self.up2 = ResBlock(a.ch_lo + a.ch_hi, a.ch_hi, a.width, a.groups)
        self.head_norm = nn.GroupNorm(min(a.groups, a.ch_hi), a.ch_hi)
        self.head = nn.Conv2d(a.ch_hi, a.in_channels, 3, padding=1)
        sched = make_schedule(a.T)
        self.register_buffer("sched_alpha", sched.alpha.float(), persistent=False)
        self.register_buffer("sched_sigma", sched.sigma.float(), persistent=False)
        self.n_evals = 0

    # -- embeddings -------------------------------------------------------
    def omega_encoding(self, omega: Tensor) -> Tensor:
        k = torch.arange(self.arch.omega_freqs, dtype=torch.float64)
        freqs = (2.0 ** k) / 20.0  # slowest period covers the full [0, 19] range
        ang = omega.to(torch.float64)[:, None] * freqs[None, :] * math.pi
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)

    def embed_condition(self, t: Tensor, label: Tensor, omega: Tensor) -> Tensor:
        """[sinusoidal(t) | label embedding | MLP(omega encoding)], width = arch.width."""
        dtype = self.label_emb.weight.dtype
        if label.min() < 0 or label.max() >= N_CONDITIONS:
            raise ValueError(f"label index out of range [0, {N_CONDITIONS - 1}]")
        te = sinusoidal(t, self.arch.t_dim).to(dtype)
        le = self.label_emb(label)
        oe = self.omega_mlp(self.omega_encoding(omega).to(dtype))
        return torch.cat([te, le, oe], dim=1)

    # -- forward ----------------------------------------------------------
    def forward(
        self,
        z: Tensor,
        t: Tensor | int,
        label: Tensor | int,
        omega: Tensor | float = 0.0,
        capture_hooks: bool = False,
    ) -> tuple[Tensor, HookBundle | None]:
        v, alpha, sigma, hooks = self._velocity(z, t, label, omega, capture_hooks)
        return alpha * v + sigma * z, hooks

    def _velocity(self, z, t, label, omega, capture_hooks):
        a = self.arch
        if z.dim() != 4 or z.shape[1:] != (a.in_channels, a.image_size, a.image_size):
            raise ValueError(f"latent shape {tuple(z.shape)} does not match architecture")
        b = z.shape[0]
        t = _batched(t, b, torch.long)
        if t.min() < 0 or t.max() > a.T:
            raise ValueError(f"timestep out of range [0, {a.T}]")
        label = _batched(label, b, torch.long)
        omega = _batched(omega, b, z.dtype)
        self.n_evals += 1

        emb = self.emb_mlp(self.embed_condition(t, label, omega))
        h0 = self.stem(z)
        h_hi = self.res_hi(h0, emb)
        h = self.res_lo1(self.down(h_hi), emb)
        h_lo = h
        h, attn = self.attn(h)
        h = self.res_lo2(h, emb)
        f1 = self.up1(torch.cat([h, h_lo], dim=1), emb)
        h = F.interpolate(f1, scale_factor=2, mode="nearest")
        f2 = self.up2(torch.cat([h, h_hi], dim=1), emb)
        v = self.head(F.silu(self.head_norm(f2)))
        alpha = self.sched_alpha[t].to(z.dtype).reshape(-1, 1, 1, 1)
        sigma = self.sched_sigma[t].to(z.dtype).reshape(-1, 1, 1, 1)
        hooks = HookBundle(attn=[attn], feats=[f1, f2]) if capture_hooks else None
        return v, alpha, sigma, hooks

    def eps(self, z, t, label, omega=0.0) -> Tensor:
        return self(z, t, label, omega)[0]

    def predict(self, z, t, label, omega=0.0) -> tuple[Tensor, Tensor]:
        """(eps_hat, x0_hat) from one pass. x0 comes straight from v, avoiding (z - sigma*eps)/alpha."""
        v, alpha, sigma, _ = self._velocity(z, t, label, omega, False)
        return alpha * v + sigma * z, alpha * z - sigma * v

    # -- adapters ---------------------------------------------------------
    def attach_adapter(self, rank: int, generator: torch.Generator | None = None) -> "Denoiser":
        """Freeze host weights and wrap every dense layer with a rank-``rank`` adapter."""
        for p in self.parameters():
            p.requires_grad_(False)
        targets = [(n, m) for n, m in self.named_modules() if isinstance(m, nn.Linear)]
        for name, lin in targets:
            if rank > min(lin.in_features, lin.out_features):
                raise ValueError(f"rank {rank} exceeds dimension of dense layer {name}")
        for name, lin in targets:
            parent, attr = _parent(self, name)
            setattr(parent, attr, LoRALinear(lin, rank, generator=generator))
        return self

    def set_adapter_trainable(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        for m in self.modules():
            if isinstance(m, LoRALinear):
                m.down.requires_grad_(True)
                m.up.requires_grad_(True)

    @property
    def has_adapter(self) -> bool:
        return any(isinstance(m, LoRALinear) for m in self.modules())

    def adapter_rank(self) -> int:
        for m in self.modules():
            if isinstance(m, LoRALinear):
                return m.rank
        return 0


def _batched(v, b: int, dtype: torch.dtype) -> Tensor:
    if isinstance(v, Tensor):
        v = v.to(dtype)
        if v.dim() == 0:
            v = v.expand(b)
        return v
    return torch.full((b,), v, dtype=dtype)


def _parent(root: nn.Module, dotted: str) -> tuple[nn.Module, str]:
    parts = dotted.split(".")
    mod = root
    for p in parts[:-1]:
        mod = getattr(mod, p)
    return mod, parts[-1]


def build_model(arch: Arch, role: str, seed: int, adapter_rank: int = 0) -> Denoiser:
    torch.manual_seed(seed)
    model = Denoiser(arch, role)
    if adapter_rank:
        g = torch.Generator().manual_seed(seed + 1)
        model.attach_adapter(adapter_rank, generator=g)
    return model
