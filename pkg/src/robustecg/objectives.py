"""Contrastive and self-distillation losses.

All reductions are means so learning rates do not depend on batch size.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BatchTooSmall, ConfigError, EmptyBatch, NonFiniteInput, ShapeMismatch


@dataclass
class ContrastiveConfig:
    init_tau: float = 0.07
    min_tau: float = 0.01
    max_tau: float = 1.0
    learnable: bool = True

    def __post_init__(self):
        if not 0 < self.min_tau <= self.init_tau <= self.max_tau:
            raise ConfigError(f"need 0 < min_tau <= init_tau <= max_tau, got {self}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DistillConfig:
    tau_t: float = 0.04
    tau_s: float = 0.1
    center_momentum: float = 0.9

    def __post_init__(self):
        if not 0 < self.tau_t < self.tau_s:
            raise ConfigError(f"need 0 < tau_t < tau_s, got {self.tau_t}, {self.tau_s}")
        if not 0 <= self.center_momentum < 1:
            raise ConfigError(f"center_momentum must be in [0, 1), got {self.center_momentum}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ConfigError(f"loss weights must be >= 0 and not both zero, got {self}")

    def to_dict(self) -> dict:
        return asdict(self)


class Temperature(nn.Module):
    """Learnable contrastive temperature, stored as log(1/tau) and clamped."""

    def __init__(self, config: ContrastiveConfig | None = None):
        super().__init__()
        self.config = c = config or ContrastiveConfig()
        self.log_inv_tau = nn.Parameter(torch.tensor(math.log(1 / c.init_tau)), requires_grad=c.learnable)

    def forward(self) -> torch.Tensor:
        c = self.config
        return 1.0 / self.log_inv_tau.clamp(math.log(1 / c.max_tau), math.log(1 / c.min_tau)).exp()


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(torch.as_tensor(t)).all():
            raise NonFiniteInput("loss input contains NaN or Inf")


def report_align_loss(S: torch.Tensor, T: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE between matched ECG and text embeddings.

    ``S`` and ``T`` are ``(B, dim)`` with row ``i`` of each forming a pair;
    the result averages the ecg-to-text and text-to-ecg cross-entropies.
    """
    if S.dim() != 2 or S.shape != T.shape:
        raise ShapeMismatch(f"S and T must be matching (B, dim) matrices, got {tuple(S.shape)}, {tuple(T.shape)}")
    if S.shape[0] < 2:
        raise BatchTooSmall("contrastive loss needs at least two pairs")
    _check_finite(S, T, tau)
    logits = S @ T.T / tau
    target = torch.arange(S.shape[0], device=S.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def teacher_targets(teacher_logits: torch.Tensor, center: torch.Tensor, tau_t: float) -> torch.Tensor:
    """Centered, sharpened teacher distributions, detached from the graph."""
    return F.softmax((teacher_logits.detach() - center.detach()) / tau_t, dim=-1)


def duodistill_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    center: torch.Tensor,
    tau_t: float,
    tau_s: float,
) -> torch.Tensor:
    """Cross-entropy from centered, sharpened teacher views to student views.

    ``teacher_logits`` is ``(..., K, D)`` for the minor views and
    ``student_logits`` is ``(..., K + N, D)`` for all views, minor first.
    Teacher view ``i`` is paired with every student view except view ``i``;
    the loss is the mean over the ``K * (K + N - 1)`` pairs (and any leading
    batch axes). No gradient flows to the teacher side or the center.
    """
    if teacher_logits.dim() < 2 or student_logits.dim() != teacher_logits.dim():
        raise ShapeMismatch("teacher and student logits must share rank >= 2")
    k, d = teacher_logits.shape[-2:]
    if (student_logits.shape[-1] != d or student_logits.shape[-2] <= k
            or student_logits.shape[:-2] != teacher_logits.shape[:-2]):
        raise ShapeMismatch(
            f"teacher {tuple(teacher_logits.shape)} incompatible with student {tuple(student_logits.shape)}"
        )
    if center.shape[-1] != d:
        raise ShapeMismatch(f"center has dim {center.shape[-1]}, logits have {d}")
    _check_finite(teacher_logits, student_logits, center)

    # float64 accumulation: D-term sums in float32 drift by ~1e-5 at D=1024
    q = teacher_targets(teacher_logits.double(), center.double(), tau_t)
    log_p = F.log_softmax(student_logits.double() / tau_s, dim=-1)
    ce = -torch.einsum("...id,...jd->...ij", q, log_p)
    v = student_logits.shape[-2]
    keep = ~torch.eye(k, v, dtype=torch.bool, device=ce.device)
    return ce[..., keep].mean().to(student_logits.dtype)


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    """EMA of the mean teacher logit row."""
    if not 0 <= momentum < 1:
        raise ConfigError(f"center momentum must be in [0, 1), got {momentum}")
    rows = teacher_logits.detach().reshape(-1, teacher_logits.shape[-1])
    if rows.shape[0] == 0:
        raise EmptyBatch("no teacher logits to update the center with")
    return momentum * center + (1 - momentum) * rows.mean(dim=0)


def total_loss(l_report, l_distill, weights: LossWeights) -> torch.Tensor:
    """Weighted sum; a zero-weighted term may be ``None``."""
    parts = []
    for w, l in ((weights.alpha, l_report), (weights.beta, l_distill)):
        if w == 0:
            continue
        if l is None:
            raise ConfigError("a loss term with non-zero weight is missing")
        l = torch.as_tensor(l)
        _check_finite(l)
        parts.append(w * l)
    return sum(parts)
