"""Small networks and numerical helpers shared by the tests."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from gazeadapt.nets import Discriminator3D, LEAK


class TinyRegressor(nn.Module):
    """Same interface as GazeRegressor (features / regress_raw) at toy scale.

    Input 1x19x23; taps C1..C5 shrink by 2 px per layer; FC1 is 8 wide.
    """

    def __init__(self):
        super().__init__()
        self.c1 = nn.Conv2d(1, 2, 3)
        self.c2 = nn.Conv2d(2, 2, 3)
        self.c3 = nn.Conv2d(2, 3, 3)
        self.c4 = nn.Conv2d(3, 3, 3)
        self.c5 = nn.Conv2d(3, 4, 3)
        self.fc1 = nn.Linear(4 * 9 * 13, 8)
        self.fc2 = nn.Linear(8, 6)
        self.fc3 = nn.Linear(6, 3)

    def features(self, x):
        act = lambda t: F.leaky_relu(t, LEAK)
        taps = {}
        h = taps["C1"] = act(self.c1(x))
        h = taps["C2"] = act(self.c2(h))
        h = taps["C3"] = act(self.c3(h))
        h = taps["C4"] = act(self.c4(h))
        h = taps["C5"] = act(self.c5(h))
        taps["FC1"] = act(self.fc1(h.flatten(1)))
        return taps

    def regress_raw(self, fc1):
        return self.fc3(F.leaky_relu(self.fc2(fc1), LEAK))

    def feature_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith(("fc2", "fc3"))]


def tiny_setup(seed=0, mode="gan", disc_scale=0.08):
    """Float64 tiny regressor, a C3C5 3D discriminator without dropout, 4-sample batches.

    The discriminator weights are small so its scores stay away from the
    clamped sigmoid tails, where every gradient is exactly zero.
    """
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    net = TinyRegressor().double()
    disc = Discriminator3D(4, 2, (13, 17), mode=mode, conv_dropout=0.0, fc_dropout=0.0).double()
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)
        for p in disc.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * disc_scale)
    xs = torch.randn(4, 1, 19, 23, generator=g, dtype=torch.float64)
    xt = torch.randn(4, 1, 19, 23, generator=g, dtype=torch.float64) * 0.6 + 0.1
    ys = F.normalize(torch.randn(4, 3, generator=g, dtype=torch.float64), dim=1)
    return net, disc, xs, xt, ys


def central_difference(fn, param, index, h=1e-6):
    """(f(p + h e_i) - f(p - h e_i)) / 2h for one flat coordinate of ``param``."""
    flat = param.data.view(-1)
    orig = flat[index].item()
    with torch.no_grad():
        flat[index] = orig + h
        up = float(fn())
        flat[index] = orig - h
        down = float(fn())
        flat[index] = orig
    return (up - down) / (2 * h)


def check_gradients(fn, params, n_coords=6, seed=0, h=1e-7, floor=1e-4):
    """Worst relative error between autograd and central differences over sampled coordinates.

    Components below ``floor`` in magnitude are compared against ``floor``
    (central differences of an exactly zero gradient return rounding noise).
    Fails if no sampled component reaches ``floor``: such a check proves nothing.
    """
    for p in params:
        p.grad = None
    fn().backward()
    grads = [p.grad.detach().clone() for p in params]
    gen = torch.Generator().manual_seed(seed)
    worst, largest = 0.0, 0.0
    for p, g in zip(params, grads):
        idx = torch.randperm(p.numel(), generator=gen)[:n_coords]
        for i in idx.tolist():
            fd = central_difference(fn, p, i, h)
            an = g.view(-1)[i].item()
            largest = max(largest, abs(an))
            denom = max(abs(fd), abs(an), floor)
            worst = max(worst, abs(fd - an) / denom)
    assert largest >= floor, f"all sampled gradients below {floor}; the check is vacuous"
    return worst
