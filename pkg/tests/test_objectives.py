import copy
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import check_gradients, tiny_setup
from gazeadapt.errors import DegenerateVectorError
from gazeadapt.nets import Discriminator2D, FeatureSelection, assemble_feature_stack
from gazeadapt.objectives import (angular_error_degrees, clip_critic_weights, critic_loss_wgan,
                                  discriminator_loss_gan, equilibrium_value, grl_combined_step,
                                  grl_losses, mapper_loss_gan, mapper_loss_wgan, regression_loss,
                                  reverse_gradient)

TINY_SEL = FeatureSelection(("C3", "C5"), include_fc1=False)


def _unit(deg, dtype=torch.float64):
    r = math.radians(deg)
    return torch.tensor([[math.sin(r), 0.0, math.cos(r)]], dtype=dtype)


# -- regression loss and metric ------------------------------------------------------------


def test_chord_at_sixty_degrees_is_one():
    loss = regression_loss(_unit(60.0), _unit(0.0))
    assert abs(loss.item() - 1.0) < 1e-12


def test_angle_of_ten_degrees():
    assert abs(angular_error_degrees(_unit(10.0), _unit(0.0))[0] - 10.0) < 1e-9


def test_identical_vectors_zero_error():
    v = F.normalize(torch.randn(5, 3, dtype=torch.float64), dim=1)
    assert regression_loss(v, v).item() == 0.0
    assert np.all(angular_error_degrees(v, v) < 1e-6)


def test_zero_vector_rejected():
    with pytest.raises(DegenerateVectorError):
        regression_loss(torch.zeros(1, 3), _unit(0.0, torch.float32))
    with pytest.raises(DegenerateVectorError):
        angular_error_degrees(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]))


def test_chord_and_angle_agree():
    # independent route: chord = 2 sin(theta / 2)
    g = torch.Generator().manual_seed(0)
    a = F.normalize(torch.randn(1000, 3, generator=g, dtype=torch.float64), dim=1)
    b = F.normalize(torch.randn(1000, 3, generator=g, dtype=torch.float64), dim=1)
    chord = regression_loss(a, b).terms.numpy()
    theta = np.radians(angular_error_degrees(a, b))
    assert np.allclose(chord, 2 * np.sin(theta / 2), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_regression_loss_permutation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    a = F.normalize(torch.randn(16, 3, generator=g, dtype=torch.float64), dim=1)
    b = F.normalize(torch.randn(16, 3, generator=g, dtype=torch.float64), dim=1)
    perm = torch.randperm(16, generator=g)
    assert abs(regression_loss(a, b).item() - regression_loss(a[perm], b[perm]).item()) < 1e-12


# -- adversarial losses ------------------------------------------------------------------------


def test_equilibrium_values():
    half = torch.full((8,), 0.5, dtype=torch.float64)
    assert abs(discriminator_loss_gan(half, half).item() - 2 * math.log(2)) < 1e-9
    assert abs(mapper_loss_gan(half).item() - math.log(2)) < 1e-9
    assert abs(equilibrium_value() - math.log(4)) < 1e-9


def test_mapper_gradient_at_half():
    t = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
    mapper_loss_gan(t).value.backward()
    h = 1e-6
    fd = (-math.log(0.5 + h) + math.log(0.5 - h)) / (2 * h)
    assert abs(t.grad.item() - fd) < 1e-6
    assert abs(t.grad.item() + 2.0) < 1e-9


def test_confident_scores_are_finite():
    loss = discriminator_loss_gan(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))
    assert math.isfinite(loss.item())


def test_wgan_losses_are_linear():
    s = torch.tensor([1.0, 3.0], dtype=torch.float64)
    t = torch.tensor([-2.0, 0.5], dtype=torch.float64)
    assert critic_loss_wgan(s, t).item() == pytest.approx(-0.75 - 2.0, abs=1e-12)
    assert critic_loss_wgan(3 * s, 3 * t).item() == pytest.approx(3 * critic_loss_wgan(s, t).item())
    assert mapper_loss_wgan(t).item() == pytest.approx(0.75, abs=1e-12)


def test_critic_clipping():
    torch.manual_seed(0)
    d = Discriminator2D(4, (10, 20), mode="wgan")
    with torch.no_grad():
        for p in d.parameters():
            p.normal_(0, 1)
    clip_critic_weights(d, 0.01)
    assert max(p.abs().max().item() for p in d.parameters()) <= 0.01


# -- finite-difference gradient checks --------------------------------------------------------


def test_regression_gradient_matches_finite_differences():
    net, _, xs, _, ys = tiny_setup(0)

    def fn():
        pred = F.normalize(net.regress_raw(net.features(xs)["FC1"]), dim=1)
        return regression_loss(pred, ys).value

    assert check_gradients(fn, list(net.parameters()), n_coords=4) < 1e-4


def test_discriminator_gradient_matches_finite_differences():
    net, disc, xs, xt, _ = tiny_setup(1)
    with torch.no_grad():
        ss = assemble_feature_stack(net.features(xs), TINY_SEL)
        st_ = assemble_feature_stack(net.features(xt), TINY_SEL)

    def fn():
        return discriminator_loss_gan(disc(ss), disc(st_)).value

    assert check_gradients(fn, list(disc.parameters()), n_coords=4) < 1e-4


def test_mapper_gradient_matches_finite_differences():
    net, disc, _, xt, _ = tiny_setup(2)
    importance = torch.tensor([1.3, 0.7], dtype=torch.float64, requires_grad=True)
    for p in disc.parameters():
        p.requires_grad_(False)

    def fn():
        return mapper_loss_gan(disc(assemble_feature_stack(net.features(xt), TINY_SEL, importance))).value

    params = net.feature_parameters()[:-2] + [importance]  # fc1 does not feed the C3/C5 stack
    assert check_gradients(fn, params, n_coords=4) < 1e-4


def test_wgan_gradient_matches_finite_differences():
    net, disc, xs, xt, _ = tiny_setup(3, mode="wgan")

    def fn():
        s = disc(assemble_feature_stack(net.features(xs), TINY_SEL))
        t = disc(assemble_feature_stack(net.features(xt), TINY_SEL))
        return critic_loss_wgan(s, t).value

    assert check_gradients(fn, list(disc.parameters()) + [net.c3.weight], n_coords=4) < 1e-4


# -- gradient reversal -----------------------------------------------------------------------


def test_reverse_gradient_forward_identity_backward_scaled():
    x = torch.randn(5, dtype=torch.float64, requires_grad=True)
    y = reverse_gradient(x, 0.7)
    assert torch.equal(y, x)
    (y * torch.arange(5.0, dtype=torch.float64)).sum().backward()
    assert torch.allclose(x.grad, -0.7 * torch.arange(5.0, dtype=torch.float64))


def _grl_copies(seed=4):
    net, disc, xs, xt, ys = tiny_setup(seed)
    return net, disc, xs, xt, ys


def test_grl_lambda_zero_matches_source_step():
    net, disc, xs, xt, ys = _grl_copies()
    ref = copy.deepcopy(net)
    opt = torch.optim.SGD(net.parameters(), lr=0.1)
    d_opt = torch.optim.SGD(disc.parameters(), lr=0.1)
    grl_combined_step(net, disc, opt, d_opt, TINY_SEL, (xs, ys), xt, 0.0)

    ref_opt = torch.optim.SGD(ref.parameters(), lr=0.1)
    pred = F.normalize(ref.regress_raw(ref.features(xs)["FC1"]), dim=1)
    regression_loss(pred, ys).value.backward()
    ref_opt.step()
    for (n, a), (_, b) in zip(net.named_parameters(), ref.named_parameters()):
        assert torch.equal(a, b), n


def test_grl_lambda_one_reverses_feature_gradient():
    net, disc, xs, xt, ys = _grl_copies()
    p = net.c3.weight

    def domain_loss():
        return grl_losses(net, disc, TINY_SEL, xs, ys, xt, 1.0)[1].value

    p.grad = None
    domain_loss().backward()
    autograd = p.grad.view(-1)[:5].clone()
    # finite differences of the domain loss (the forward pass has no reversal)
    fd = torch.zeros(5, dtype=torch.float64)
    h = 1e-6
    with torch.no_grad():
        flat = p.data.view(-1)
        for i in range(5):
            orig = flat[i].item()
            flat[i] = orig + h
            up = domain_loss().item()
            flat[i] = orig - h
            down = domain_loss().item()
            flat[i] = orig
            fd[i] = (up - down) / (2 * h)
    assert torch.allclose(autograd, -fd, rtol=1e-4, atol=1e-9)


def test_grl_head_update_independent_of_lambda():
    heads = []
    for lam in (0.0, 1.0, 5.0):
        net, disc, xs, xt, ys = _grl_copies()
        opt = torch.optim.SGD(net.parameters(), lr=0.1)
        d_opt = torch.optim.SGD(disc.parameters(), lr=0.1)
        grl_combined_step(net, disc, opt, d_opt, TINY_SEL, (xs, ys), xt, lam)
        heads.append([q.detach().clone() for q in disc.parameters()])
    for other in heads[1:]:
        for a, b in zip(heads[0], other):
            assert torch.equal(a, b)
