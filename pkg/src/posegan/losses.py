"""Objective terms for the critic, generator and pose-eliminate probe.

Adversarial terms default to the Wasserstein form (critic scores are
unbounded reals); ``mode="log"`` switches to the saturating log-likelihood
form for ablations. Probabilities are floored at ``PROB_FLOOR`` before logs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

from .errors import InvalidArgument

PROB_FLOOR = 1e-12
_LOG_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_pose: float = 2.0
    lambda_gp: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise InvalidArgument(f"{k} must be >= 0, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def _nonempty(t: torch.Tensor, name: str) -> None:
    if t.numel() == 0:
        raise InvalidArgument(f"{name} is empty")


def adv_d(real_scores: torch.Tensor, fake_scores: torch.Tensor, mode: str = "wgan") -> torch.Tensor:
    _nonempty(real_scores, "real_scores")
    _nonempty(fake_scores, "fake_scores")
    if mode == "wgan":
        return -real_scores.mean() + fake_scores.mean()
    if mode == "log":
        # critic maximizes log D(x) + log(1 - D(G(x))); scores are logits
        return (F.binary_cross_entropy_with_logits(real_scores, torch.ones_like(real_scores))
                + F.binary_cross_entropy_with_logits(fake_scores, torch.zeros_like(fake_scores)))
    raise InvalidArgument(f"unknown adversarial mode {mode!r}")


def adv_g(fake_scores: torch.Tensor, mode: str = "wgan") -> torch.Tensor:
    _nonempty(fake_scores, "fake_scores")
    if mode == "wgan":
        return -fake_scores.mean()
    if mode == "log":
        return F.binary_cross_entropy_with_logits(fake_scores, torch.ones_like(fake_scores))
    raise InvalidArgument(f"unknown adversarial mode {mode!r}")


def style_consistency(fake_scores_at_decimal_pose: torch.Tensor, mode: str = "wgan") -> torch.Tensor:
    """Adversarial realism of syntheses at non-anchor (decimal) target poses."""
    return adv_g(fake_scores_at_decimal_pose, mode)


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor, fake: torch.Tensor,
                     generator: torch.Generator | None = None, alpha: torch.Tensor | None = None) -> torch.Tensor:
    """mean((||grad_x critic(x_hat)||_2 - 1)^2) over per-sample interpolates.

    ``critic`` returns the realism map; its sum per sample is differentiated.
    The result is differentiable w.r.t. the critic parameters.
    """
    if real.shape != fake.shape:
        raise InvalidArgument(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ in shape")
    _nonempty(real, "real")
    if alpha is None:
        alpha = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=generator, dtype=real.dtype)
    x_hat = (alpha * real.detach() + (1 - alpha) * fake.detach()).requires_grad_(True)
    out = critic(x_hat)
    grad, = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def _floored_log_softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.clamp(F.log_softmax(logits, dim=-1), min=_LOG_FLOOR)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _nonempty(logits, "logits")
    logp = _floored_log_softmax(logits)
    return -logp.gather(-1, labels.long().view(-1, 1)).mean()


def cls_real(pose_logits: torch.Tensor, true_label: torch.Tensor) -> torch.Tensor:
    return cross_entropy(pose_logits, true_label)


def cls_fake(pose_logits_of_fake: torch.Tensor, target_label: torch.Tensor) -> torch.Tensor:
    return cross_entropy(pose_logits_of_fake, target_label)


def reconstruction(x: torch.Tensor, x_cycled: torch.Tensor) -> torch.Tensor:
    if x.shape != x_cycled.shape:
        raise InvalidArgument("reconstruction inputs differ in shape")
    _nonempty(x, "x")
    return (x - x_cycled).abs().mean()


def pose_elim_p(probe_logits: torch.Tensor, true_label: torch.Tensor) -> torch.Tensor:
    return cross_entropy(probe_logits, true_label)


def pose_elim_g(probe_logits: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against the uniform distribution; minimum ln N at uniform output."""
    _nonempty(probe_logits, "probe_logits")
    return -_floored_log_softmax(probe_logits).mean(dim=-1).mean()


def _part(parts: Mapping, key: str):
    v = parts.get(key)
    return 0.0 if v is None else v


def total_g(weights: LossWeights, parts: Mapping, lambda_pose: float | None = None):
    """adv + l_cls*cls_fake + l_rec*rec + l_pose*pose_g (+ style on decimal-pose steps)."""
    lp = weights.lambda_pose if lambda_pose is None else lambda_pose
    total = (_part(parts, "adv_g") + weights.lambda_cls * _part(parts, "cls")
             + weights.lambda_rec * _part(parts, "rec") + _part(parts, "style"))
    if lp:
        total = total + lp * _part(parts, "pose_g")
    return total


def total_d(weights: LossWeights, parts: Mapping):
    return (_part(parts, "adv_d") + weights.lambda_gp * _part(parts, "gp")
            + weights.lambda_cls * _part(parts, "cls_real"))


def total_p(parts: Mapping):
    return _part(parts, "pose_p")
