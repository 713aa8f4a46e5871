"""Numeric substrate: reverse-mode gradients, Adam, and a finite-difference oracle.

Tensors are ``torch.Tensor`` (row-major float32 by default, float64 in
gradient-check mode). Reverse-mode differentiation is delegated to torch's
autograd tape; this module pins the contracts the rest of the package relies
on: scalar-only backward, zero gradients for unused leaves, and a hard stop
on non-finite values.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch
from torch import Tensor, nn


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient contains NaN/Inf."""


class GraphError(RuntimeError):
    """Raised for non-scalar losses or losses detached from every parameter."""


def check_finite(name: str, t: Tensor) -> None:
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).sum().item()
        raise NonFiniteError(f"{name}: {bad} non-finite value(s) in tensor of shape {tuple(t.shape)}")


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Return d(loss)/d(p) for every parameter in ``params`` that requires grad.

    Parameters that do not take part in the graph get an all-zero gradient.
    The recorded graph is released afterwards.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise GraphError("loss is detached from the tape")
    check_finite("loss", loss)
    names = [k for k, p in params.items() if p.requires_grad]
    if not names:
        raise GraphError("no trainable parameters supplied")
    grads = torch.autograd.grad(loss.reshape(()), [params[k] for k in names], allow_unused=True)
    out: dict[str, Tensor] = {}
    for name, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(params[name])
        check_finite(f"grad[{name}]", g)
        out[name] = g
    return out


def trainable(module: nn.Module) -> dict[str, Tensor]:
    return {k: p for k, p in module.named_parameters() if p.requires_grad}


@dataclass
class AdamState:
    """Bias-corrected Adam over a named parameter set.

    Moments live inside the wrapped ``torch.optim.Adam``; ``step`` counts
    completed updates.
    """

    params: dict[str, Tensor]
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    _opt: torch.optim.Adam = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._opt = torch.optim.Adam(list(self.params.values()), lr=self.lr, betas=self.betas, eps=self.eps)

    def moments(self, name: str) -> tuple[Tensor, Tensor]:
        st = self._opt.state.get(self.params[name], {})
        p = self.params[name]
        return st.get("exp_avg", torch.zeros_like(p)), st.get("exp_avg_sq", torch.zeros_like(p))


def adam_step(state: AdamState, grads: Mapping[str, Tensor]) -> None:
    """Apply one Adam update in place. Aborts before touching anything if a gradient is non-finite."""
    if set(grads) != set(state.params):
        missing = set(state.params) ^ set(grads)
        raise KeyError(f"gradient/parameter name mismatch: {sorted(missing)[:5]}")
    for name, g in grads.items():
        p = state.params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        check_finite(f"grad[{name}]", g)
    for name, p in state.params.items():
        p.grad = grads[name].detach().clone()
    state._opt.step()
    for p in state.params.values():
        p.grad = None
    state.step += 1


@contextlib.contextmanager
def precision(modules: Iterable[nn.Module], dtype: torch.dtype):
    """Temporarily cast modules to ``dtype``. float32 -> float64 -> float32 is lossless."""
    modules = list(modules)
    saved = [next(m.parameters()).dtype if any(True for _ in m.parameters()) else torch.float32 for m in modules]
    try:
        for m in modules:
            m.to(dtype)
        yield
    finally:
        for m, d in zip(modules, saved):
            m.to(d)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
    probes: int | None = None,
    modules: Iterable[nn.Module] = (),
    generator: torch.Generator | None = None,
    oracle_dtype: torch.dtype = torch.float64,
    order: int = 2,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The analytic gradient is taken at ``x``'s own dtype. The central
    differences are evaluated in ``oracle_dtype`` (with ``modules`` cast for
    the duration) so the oracle is not limited by float32 round-off.
    ``probes`` picks that many random coordinates; ``None`` checks all.
    ``order`` is 2 for the 3-point stencil or 4 for the 5-point one, whose
    O(h^4) truncation error suits tolerances near float64 round-off.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, 1e-3 * max|a|)``:
    coordinates whose gradient is negligible next to the largest one are
    judged against that scale instead of their own near-zero magnitude.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    modules = list(modules)
    x0 = x.detach().clone().requires_grad_(True)
    y = f(x0)
    if y.numel() != 1:
        raise GraphError("finite_diff_check needs a scalar function")
    (g,) = torch.autograd.grad(y.reshape(()), [x0], allow_unused=True)
    if g is None:
        g = torch.zeros_like(x0)
    g = g.detach().reshape(-1).to(torch.float64)

    n = x0.numel()
    if probes is None or probes >= n:
        idx = torch.arange(n)
    else:
        idx = torch.randperm(n, generator=generator)[:probes]

    xd = x.detach().to(oracle_dtype).reshape(-1)
    num = torch.empty(len(idx), dtype=torch.float64)
    with torch.no_grad(), precision(modules, oracle_dtype):
        def at(i, step):
            xs = xd.clone()
            xs[i] += step
            return f(xs.reshape(x.shape)).reshape(()).to(torch.float64)

        for j, i in enumerate(idx.tolist()):
            d1 = (at(i, h) - at(i, -h)) / (2 * h)
            if order == 4:
                d2 = (at(i, 2 * h) - at(i, -2 * h)) / (4 * h)
                d1 = (4 * d1 - d2) / 3
            num[j] = d1

    a = g[idx]
    scale = max(g.abs().max().item() * 1e-3, 1e-30)
    denom = torch.maximum(torch.maximum(a.abs(), num.abs()), torch.full_like(a, scale))
    err = ((a - num).abs() / denom).max().item()
    return float(err)
