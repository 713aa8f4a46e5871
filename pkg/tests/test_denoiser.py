import math

import pytest
import torch

from icedit.denoiser import Arch, LoRALinear, build_model, sinusoidal
from icedit.numcore import backward, finite_diff_check, trainable


def test_forward_is_deterministic_and_shape_preserving(model):
    z = torch.randn(3, 1, 16, 16)
    a, _ = model(z, 10, torch.tensor([0, 3, 8]))
    b, _ = model(z, 10, torch.tensor([0, 3, 8]))
    assert a.shape == z.shape and torch.equal(a, b)


def test_attention_rows_are_stochastic(model):
    z = torch.randn(2, 1, 16, 16)
    _, hooks = model(z, 40, 1, 3.0, capture_hooks=True)
    assert len(hooks.attn) >= 1 and len(hooks.feats) == 2
    for a in hooks.attn:
        assert a.shape == (2, 2, 64, 64)
        assert (a >= 0).all()
        assert torch.allclose(a.sum(-1), torch.ones(2, 2, 64), atol=1e-5)


def test_hooks_only_on_request(model):
    _, hooks = model(torch.randn(1, 1, 16, 16), 5, 0)
    assert hooks is None


def test_validation_errors(model):
    with pytest.raises(ValueError):
        model(torch.randn(1, 1, 8, 8), 5, 0)
    with pytest.raises(ValueError):
        model(torch.randn(1, 1, 16, 16), 5, 9)
    with pytest.raises(ValueError):
        model(torch.randn(1, 1, 16, 16), 65, 0)


def test_zero_initialised_adapter_is_bit_exact(model):
    z = torch.randn(2, 1, 16, 16)
    ref = model.eps(z, 20, 4, 7.0)
    model.attach_adapter(8, generator=torch.Generator().manual_seed(0))
    assert torch.equal(model.eps(z, 20, 4, 7.0), ref)


def test_adapter_parameter_count(model):
    model.attach_adapter(8)
    lin = model.emb_mlp[0]
    assert isinstance(lin, LoRALinear) and lin.host.in_features == lin.host.out_features == 64
    assert lin.down.numel() + lin.up.numel() == 2 * 8 * 64
    assert all(k.endswith((".down", ".up")) for k in trainable(model))


def test_adapter_freezes_host(model):
    model.attach_adapter(4)
    model.up1.emb.up.data.normal_()  # give the host path a live adapter
    z = torch.randn(1, 1, 16, 16)
    grads = backward(model.eps(z, 30, 2).pow(2).sum(), trainable(model))
    assert grads and all(k.endswith(".down") or k.endswith(".up") for k in grads)
    assert all(p.grad is None for n, p in model.named_parameters() if "host" in n)


def test_adapter_rank_too_large(model):
    with pytest.raises(ValueError):
        model.attach_adapter(65)


def test_omega_changes_only_omega_block(model):
    t = torch.tensor([10])
    lab = torch.tensor([2])
    e0 = model.embed_condition(t, lab, torch.tensor([0.0]))
    e19 = model.embed_condition(t, lab, torch.tensor([19.0]))
    a = model.arch
    assert e0.shape[1] == a.width
    split = a.t_dim + a.label_dim
    assert torch.equal(e0[:, :split], e19[:, :split])
    assert not torch.equal(e0[:, split:], e19[:, split:])


def test_sinusoidal_at_zero():
    e = sinusoidal(torch.tensor([0]), 32)
    expected = torch.cat([torch.zeros(16), torch.ones(16)]).double()
    assert torch.equal(e[0], expected)
    e5 = sinusoidal(torch.tensor([5]), 8)
    assert e5[0, 1].item() == pytest.approx(math.sin(5 * 10000 ** (-1 / 4)))


def test_null_label_has_its_own_embedding(model):
    t, w = torch.tensor([3, 3]), torch.zeros(2)
    e = model.embed_condition(t, torch.tensor([0, 8]), w)
    assert not torch.equal(e[0], e[1])


def test_input_gradient_finite_differences(model):
    z = torch.randn(1, 1, 16, 16, generator=torch.Generator().manual_seed(1))
    w = torch.randn(1, 1, 16, 16, generator=torch.Generator().manual_seed(2))

    def f(v):
        return (model.eps(v, 24, 3, 2.0) * w.to(v.dtype)).sum()

    err = finite_diff_check(f, z, h=1e-3, probes=128, modules=[model], generator=torch.Generator().manual_seed(0))
    assert err <= 1e-3


def test_build_model_is_seeded():
    a = build_model(Arch(), "teacher", 5)
    b = build_model(Arch(), "teacher", 5)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
