"""Losses and metrics for source regression and adversarial alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateVectorError

SCORE_EPS = 1e-7
WGAN_CLIP = 0.01
WGAN_N_CRITIC = 5
NORM_EPS = 1e-12


@dataclass
class LossValue:
    value: torch.Tensor
    terms: torch.Tensor | None = None

    def item(self) -> float:
        return float(self.value.detach())


def _check_nonzero(v, what):
    norms = v.norm(dim=-1) if isinstance(v, torch.Tensor) else np.linalg.norm(v, axis=-1)
    if bool((norms <= NORM_EPS).any()):
        raise DegenerateVectorError(f"{what} contains a zero-length vector")


def regression_loss(pred: torch.Tensor, truth: torch.Tensor) -> LossValue:
    """Mean Euclidean distance between unit gaze vectors."""
    _check_nonzero(pred, "prediction")
    _check_nonzero(truth, "ground truth")
    terms = (pred - truth).norm(dim=-1)
    return LossValue(terms.mean(), terms)


def angular_error_degrees(pred, truth) -> np.ndarray:
    """Per-sample angle between gaze vectors in degrees (float64).

    Inputs are renormalised, so near-unit vectors are tolerated.
    """
    p = np.asarray(pred.detach() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    t = np.asarray(truth.detach() if isinstance(truth, torch.Tensor) else truth, dtype=np.float64)
    _check_nonzero(p, "prediction")
    _check_nonzero(t, "ground truth")
    p = p / np.linalg.norm(p, axis=-1, keepdims=True)
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    cos = np.clip(np.sum(p * t, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def _clamp(s):
    return s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def discriminator_loss_gan(scores_source: torch.Tensor, scores_target: torch.Tensor) -> LossValue:
    """-E log D(source) - E log(1 - D(target)); source is the positive class."""
    src = -torch.log(_clamp(scores_source))
    tgt = -torch.log(1.0 - _clamp(scores_target))
    return LossValue(src.mean() + tgt.mean(), torch.cat([src, tgt]))


def mapper_loss_gan(scores_target: torch.Tensor) -> LossValue:
    """Non-saturating mapping loss -E log D(target)."""
    terms = -torch.log(_clamp(scores_target))
    return LossValue(terms.mean(), terms)


def critic_loss_wgan(scores_source: torch.Tensor, scores_target: torch.Tensor) -> LossValue:
    return LossValue(scores_target.mean() - scores_source.mean())


def mapper_loss_wgan(scores_target: torch.Tensor) -> LossValue:
    return LossValue(-scores_target.mean(), -scores_target)


@torch.no_grad()
def clip_critic_weights(critic: torch.nn.Module, c: float = WGAN_CLIP) -> None:
    for p in critic.parameters():
        p.clamp_(-c, c)


def equilibrium_value() -> float:
    """Value of the discriminator loss when D outputs 1/2 everywhere: ln 4."""
    return math.log(4.0)


# -- gradient reversal --------------------------------------------------------

class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * -ctx.lam, None


def reverse_gradient(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam``."""
    return _ReverseGrad.apply(x, float(lam))


def grl_losses(regressor, discriminator, selection, source_images, source_gazes, target_images,
               lam: float):
    """Regression and domain losses of the gradient-reversal baseline (no step taken)."""
    from .nets import assemble_feature_stack, unit_normalize

    taps_s = regressor.features(source_images)
    taps_t = regressor.features(target_images)
    pred = unit_normalize(regressor.regress_raw(taps_s["FC1"]))
    reg = regression_loss(pred, source_gazes)
    rev = lambda taps: {k: reverse_gradient(taps[k], lam) for k in selection.all_taps}
    d_s = discriminator(assemble_feature_stack(rev(taps_s), selection))
    d_t = discriminator(assemble_feature_stack(rev(taps_t), selection))
    if getattr(discriminator, "mode", "gan") == "wgan":
        dom = critic_loss_wgan(d_s, d_t)
    else:
        dom = discriminator_loss_gan(d_s, d_t)
    return reg, dom


def grl_combined_step(regressor, discriminator, reg_opt, disc_opt, selection, source_batch,
                      target_images, lam: float):
    """One simultaneous update of the shared network and the domain head.

    ``source_batch`` is ``(images, gazes)``. The domain loss reaches the
    shared feature block through a gradient-reversal layer scaled by ``lam``;
    the domain head itself always descends its own loss.
    Returns ``(regression LossValue, domain LossValue)``.
    """
    reg_opt.zero_grad(set_to_none=True)
    disc_opt.zero_grad(set_to_none=True)
    src_x, src_y = source_batch
    reg, dom = grl_losses(regressor, discriminator, selection, src_x, src_y, target_images, lam)
    (reg.value + dom.value).backward()
    reg_opt.step()
    disc_opt.step()
    return reg, dom
