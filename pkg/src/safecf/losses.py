"""Scalar training objectives for the critic and the generator.

All reductions are means over batch and elements, so loss weights do not
depend on image resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import torch

from safecf.errors import ConfigError, NumericalError, ShapeError

PROB_FLOOR = 1e-12

Critic = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_gp: float = 10.0
    lambda_rec: float = 10.0
    lambda_fuse: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not value >= 0:
                raise ConfigError(f"{f.name} must be nonnegative, got {value}")


@dataclass
class LossBundle:
    """Loss components of one training iteration.

    Critic fields are set by the discriminator step and generator fields by the
    generator step; whichever step did not run leaves its fields as ``None``.
    ``adv_d`` is ``loss_real - loss_fake``.
    """

    loss_real: float | None = None
    loss_fake: float | None = None
    adv_d: float | None = None
    gp: float | None = None
    cls_real: float | None = None
    total_d: float | None = None
    adv_g: float | None = None
    cls_fake: float | None = None
    rec: float | None = None
    fuse: float | None = None
    total_g: float | None = None

    def merge(self, other: "LossBundle") -> "LossBundle":
        values = asdict(self)
        values.update({k: v for k, v in asdict(other).items() if v is not None})
        return LossBundle(**values)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class InterpolationSample:
    alpha: torch.Tensor
    x_hat: torch.Tensor


def _same_shape(*tensors: torch.Tensor) -> None:
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError(f"shape mismatch: {tuple(first)} vs {tuple(t.shape)}")


def _require_finite(**components) -> None:
    for name, value in components.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericalError(f"non-finite loss component {name!r}: {v}")


def interpolate(x: torch.Tensor, x_cf: torch.Tensor, alpha: float | torch.Tensor) -> InterpolationSample:
    """``alpha * x + (1 - alpha) * x_cf``; ``alpha`` is a scalar or one value per sample."""
    _same_shape(x, x_cf)
    alpha = torch.as_tensor(alpha, dtype=x.dtype, device=x.device)
    a = alpha.view(-1, *([1] * (x.dim() - 1))) if alpha.dim() == 1 else alpha
    return InterpolationSample(alpha, a * x + (1 - a) * x_cf)


def gradient_penalty(critic: Critic, x_hat: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Mean over the batch of ``(||d critic / d x_hat||_2 - 1)^2``.

    The norm runs over all channels and pixels of each sample. With
    ``create_graph`` the penalty can be backpropagated into the critic.
    """
    x_hat = x_hat.detach().requires_grad_(True)
    with torch.enable_grad():
        scores = critic(x_hat)
        if scores.requires_grad:
            (grads,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=create_graph)
        else:
            grads = torch.zeros_like(x_hat)
    if not torch.isfinite(grads).all():
        raise NumericalError("non-finite critic gradient in gradient penalty")
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def adversarial_d(critic: Critic, x: torch.Tensor, x_cf: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean critic score on real and on counterfactual images."""
    _same_shape(x, x_cf)
    return critic(x).mean(), critic(x_cf).mean()


def classification_loss(probs: torch.Tensor, label: torch.Tensor | int) -> torch.Tensor:
    """Batch-mean negative log-probability of ``label``, clamped away from log(0)."""
    if probs.dim() == 1:
        probs = probs[None]
    label = torch.as_tensor(label, dtype=torch.long, device=probs.device)
    if label.dim() == 0:
        label = label.expand(probs.shape[0])
    picked = probs.gather(1, label[:, None])[:, 0]
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def reconstruction_loss(
    x: torch.Tensor, s: torch.Tensor, x_rec: torch.Tensor, s_rec: torch.Tensor
) -> torch.Tensor:
    """Mean L1 distance over the joint (image, saliency) stack."""
    _same_shape(x, x_rec)
    _same_shape(s, s_rec)
    total = (x - x_rec).abs().sum() + (s - s_rec).abs().sum()
    return total / (x.numel() + s.numel())


def fuse_loss(x: torch.Tensor, x_cf: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Mean absolute change weighted by the non-salient mask ``1 - s``.

    Images are ``(N, C, H, W)`` and ``s`` is ``(N, H, W)``, broadcast over channels.
    """
    _same_shape(x, x_cf)
    if s.shape != (x.shape[0], *x.shape[2:]):
        raise ShapeError(f"saliency shape {tuple(s.shape)} does not match images {tuple(x.shape)}")
    return ((x - x_cf).abs() * (1.0 - s[:, None])).mean()


def total_d(loss_real, loss_fake, cls_real, gp, w: LossWeights):
    _require_finite(loss_real=loss_real, loss_fake=loss_fake, cls_real=cls_real, gp=gp)
    return -loss_real + loss_fake + w.lambda_cls * cls_real + w.lambda_gp * gp


def total_g(adv_g, cls_fake, gp, rec, fuse, w: LossWeights, include_rec: bool = True):
    """Generator objective.

    ``adv_g`` is the mean critic score of the counterfactuals. ``include_rec``
    set to False drops the cycle term.
    """
    _require_finite(adv_g=adv_g, cls_fake=cls_fake, gp=gp, rec=rec, fuse=fuse)
    total = -adv_g + w.lambda_cls * cls_fake + w.lambda_gp * gp + w.lambda_fuse * fuse
    if include_rec:
        total = total + w.lambda_rec * rec
    return total
