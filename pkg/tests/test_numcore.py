import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from icedit.numcore import (AdamState, GraphError, NonFiniteError, adam_step, backward, finite_diff_check,
                            precision, trainable)


def test_grad_of_sum_is_ones():
    x = torch.zeros(3, requires_grad=True)
    g = backward(x.sum(), {"x": x})
    assert torch.equal(g["x"], torch.ones(3))


def test_grad_of_sum_of_squares_matches_hand_derivative():
    x = torch.tensor([1.0, 2.0, 3.0], requires_grad=True)
    g = backward((x * x).sum(), {"x": x})
    assert torch.equal(g["x"], torch.tensor([2.0, 4.0, 6.0]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(0.1, 5))
def test_weighted_square_gradient(values, c):
    x = torch.tensor(values, dtype=torch.float64, requires_grad=True)
    g = backward((c * x * x).sum(), {"x": x})
    assert torch.allclose(g["x"], 2 * c * x.detach(), rtol=1e-12, atol=1e-12)


def test_two_layer_net_against_finite_differences():
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(6, 16), nn.Tanh(), nn.Linear(16, 1))
    x = torch.randn(5, 6)
    err = finite_diff_check(lambda v: net(v).pow(2).sum(), x, h=1e-3, modules=[net])
    assert err <= 1e-3


def test_parameter_gradient_against_finite_differences():
    torch.manual_seed(1)
    net = nn.Sequential(nn.Linear(4, 8), nn.SiLU(), nn.Linear(8, 1))
    x = torch.randn(7, 4)
    w = net[0].weight

    def f(wv):
        h = torch.nn.functional.silu(x.to(wv.dtype) @ wv.T + net[0].bias.to(wv.dtype))
        return (h @ net[2].weight.to(wv.dtype).T).sum()

    grads = backward(f(w), {"w": w})
    assert grads["w"].shape == w.shape
    assert finite_diff_check(f, w.detach(), modules=[net]) <= 1e-3


def test_non_scalar_loss_rejected():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * 2, {"x": x})


def test_detached_loss_rejected():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(GraphError):
        backward(x.detach().sum(), {"x": x})


def test_unused_leaf_gets_zero_gradient():
    x = torch.ones(3, requires_grad=True)
    y = torch.ones(2, requires_grad=True)
    g = backward(x.sum(), {"x": x, "y": y})
    assert torch.equal(g["y"], torch.zeros(2))


def test_non_finite_loss_aborts():
    x = torch.tensor([0.0], requires_grad=True)
    with pytest.raises(NonFiniteError):
        backward((x / 0.0).sum(), {"x": x})


def test_non_finite_gradient_aborts():
    x = torch.tensor([0.0], requires_grad=True)
    with pytest.raises(NonFiniteError):
        backward(torch.sqrt(x).sum(), {"x": x})


def test_gradient_linearity():
    torch.manual_seed(2)
    net = nn.Linear(5, 3)
    x = torch.randn(4, 5)
    p = trainable(net)
    la = lambda: net(x).pow(2).sum()
    lb = lambda: net(x).sin().sum()
    ga, gb, gab = backward(la(), p), backward(lb(), p), backward(la() + lb(), p)
    for k in p:
        assert torch.allclose(gab[k], ga[k] + gb[k], rtol=1e-6, atol=1e-6)


def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = torch.tensor([1.5, -2.0], requires_grad=True)
    st_ = AdamState({"p": p}, lr=0.1)
    adam_step(st_, {"p": torch.zeros(2)})
    assert torch.equal(p.detach(), torch.tensor([1.5, -2.0]))
    m, v = st_.moments("p")
    assert torch.equal(m, torch.zeros(2)) and torch.equal(v, torch.zeros(2))


def test_adam_first_step_is_minus_lr():
    p = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    st_ = AdamState({"p": p}, lr=0.1, betas=(0.9, 0.999))
    adam_step(st_, {"p": torch.ones(1, dtype=torch.float64)})
    # m_hat = v_hat = 1 -> update = -lr * 1 / (1 + eps)
    assert p.item() == pytest.approx(-0.1, abs=1e-8)
    assert st_.step == 1


def test_adam_symmetric_parameters_update_identically():
    a = torch.tensor([0.3, 0.7], requires_grad=True)
    b = torch.tensor([0.3, 0.7], requires_grad=True)
    st_ = AdamState({"a": a, "b": b}, lr=0.01)
    g = torch.tensor([0.5, -1.0])
    for _ in range(3):
        adam_step(st_, {"a": g, "b": g.clone()})
    assert torch.equal(a, b)
    assert st_.step == 3


def test_adam_shape_mismatch_rejected():
    p = torch.zeros(3, requires_grad=True)
    st_ = AdamState({"p": p})
    with pytest.raises(ValueError):
        adam_step(st_, {"p": torch.zeros(4)})


def test_adam_refuses_non_finite_gradient_without_touching_params():
    p = torch.zeros(2, requires_grad=True)
    st_ = AdamState({"p": p}, lr=0.1)
    with pytest.raises(NonFiniteError):
        adam_step(st_, {"p": torch.tensor([1.0, float("nan")])})
    assert torch.equal(p.detach(), torch.zeros(2)) and st_.step == 0


def test_finite_diff_of_sum_is_exact():
    # dyadic inputs and step keep every difference exactly representable
    x = torch.arange(-5, 5, dtype=torch.float64) / 4
    assert finite_diff_check(lambda v: v.sum(), x, h=2.0**-10) == 0.0


def test_finite_diff_quadratic_form_64bit():
    g = torch.Generator().manual_seed(3)
    a = torch.randn(6, 6, generator=g, dtype=torch.float64)
    q = a @ a.T
    x = torch.randn(6, generator=g, dtype=torch.float64)
    err = finite_diff_check(lambda v: v @ q @ v, x, h=1e-4)
    assert err <= 1e-6


def test_precision_round_trip_is_lossless():
    net = nn.Linear(3, 3)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    with precision([net], torch.float64):
        assert net.weight.dtype == torch.float64
    for k, v in net.state_dict().items():
        assert v.dtype == torch.float32 and torch.equal(v, before[k])


def test_training_is_bit_deterministic():
    def run():
        torch.manual_seed(4)
        net = nn.Linear(4, 2)
        st_ = AdamState(trainable(net), lr=1e-2)
        x = torch.randn(8, 4)
        for _ in range(5):
            adam_step(st_, backward(net(x).pow(2).mean(), st_.params))
        return b"".join(v.numpy().tobytes() for v in net.state_dict().values())

    assert run() == run()


def test_five_point_stencil_beats_truncation_error():
    f = lambda v: torch.exp(3 * v).sum()
    x = torch.tensor([0.7], dtype=torch.float64)
    e2 = finite_diff_check(f, x, h=1e-2)
    e4 = finite_diff_check(f, x, h=1e-2, order=4)
    assert e4 < e2 * 1e-3 and e4 < 1e-7
