"""Classification and metric losses, and their loss-branch-split combination."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn.functional as F

from .model.presets import BOTH, CLS, METRIC


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 0.6
    w_tri: float = 1.0
    epsilon: float = 0.1
    margin: float = 0.1
    # optional per-unit overrides, indexed like the model's units
    w_cls_per_unit: tuple[float, ...] | None = None
    w_tri_per_unit: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.w_cls < 0 or self.w_tri < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")
        for seq in (self.w_cls_per_unit, self.w_tri_per_unit):
            if seq is not None and any(w < 0 for w in seq):
                raise ValueError("loss weights must be non-negative")

    def cls_weight(self, i: int) -> float:
        return self.w_cls_per_unit[i] if self.w_cls_per_unit is not None else self.w_cls

    def tri_weight(self, i: int) -> float:
        return self.w_tri_per_unit[i] if self.w_tri_per_unit is not None else self.w_tri


def smoothed_targets(targets: torch.Tensor, n_classes: int, epsilon: float, dtype=None) -> torch.Tensor:
    """On-class 1 - (C-1)/C * eps, off-class eps/C."""
    off = epsilon / n_classes
    on = 1.0 - (n_classes - 1) / n_classes * epsilon
    y = torch.full((targets.shape[0], n_classes), off, dtype=dtype, device=targets.device)
    y.scatter_(1, targets.view(-1, 1), on)
    return y


def ce_label_smoothing(logits: torch.Tensor, targets: torch.Tensor, epsilon: float = 0.1) -> torch.Tensor:
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    n_classes = logits.shape[1]
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if targets.numel() and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError(f"target outside [0, {n_classes})")
    y = smoothed_targets(targets, n_classes, epsilon, dtype=logits.dtype)
    return -(y * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    diff = x.unsqueeze(1) - x.unsqueeze(0)
    # clamp keeps the sqrt differentiable on the diagonal
    return (diff * diff).sum(-1).clamp_min(1e-12).sqrt()


def batch_hard_triplet(embeddings: torch.Tensor, ids: torch.Tensor, margin: float = 0.1) -> torch.Tensor:
    """Mean over anchors of max(0, m + d(a, hardest positive) - d(a, hardest negative)).

    Ties in the mining step go to the lowest batch index.
    """
    ids = ids.view(-1)
    n = embeddings.shape[0]
    dist = pairwise_euclidean(embeddings)
    same = ids.view(-1, 1) == ids.view(1, -1)
    eye = torch.eye(n, dtype=torch.bool, device=embeddings.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not pos_mask.any(1).all() or not neg_mask.any(1).all():
        raise ValueError("every anchor needs at least one positive and one negative (use PK batches)")

    d = dist.detach()
    hardest_pos = d.masked_fill(~pos_mask, float("-inf")).argmax(dim=1)
    hardest_neg = d.masked_fill(~neg_mask, float("inf")).argmin(dim=1)
    rows = torch.arange(n, device=embeddings.device)
    d_ap = dist[rows, hardest_pos]
    d_an = dist[rows, hardest_neg]
    return F.relu(margin + d_ap - d_an).mean()


@dataclass
class UnitLoss:
    role: str
    cls: float | None
    tri: float | None
    weighted: float


def lbs_total(
    outputs: Iterable[tuple[torch.Tensor, str, torch.Tensor | None]],
    targets: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> tuple[torch.Tensor, list[UnitLoss]]:
    """Weighted sum of per-unit losses.

    CLS units contribute ``w_cls * CE(logits)``, METRIC units
    ``w_tri * triplet(embedding)`` and BOTH units both terms. Logits of METRIC
    units are ignored. Returns the total and a per-unit breakdown.
    """
    total = None
    breakdown: list[UnitLoss] = []
    for i, (emb, role, logits) in enumerate(outputs):
        if role not in (CLS, METRIC, BOTH):
            raise ValueError(f"unit {i}: unknown role {role!r}")
        l_cls = l_tri = None
        term = 0.0
        if role in (CLS, BOTH):
            if logits is None:
                raise ValueError(f"unit {i} has role {role} but no logits")
            l_cls = ce_label_smoothing(logits, targets, weights.epsilon)
            term = term + weights.cls_weight(i) * l_cls
        if role in (METRIC, BOTH):
            if emb is None:
                raise ValueError(f"unit {i} has role {role} but no embedding")
            l_tri = batch_hard_triplet(emb, targets, weights.margin)
            term = term + weights.tri_weight(i) * l_tri
        total = term if total is None else total + term
        breakdown.append(
            UnitLoss(
                role=role,
                cls=None if l_cls is None else float(l_cls.detach()),
                tri=None if l_tri is None else float(l_tri.detach()),
                weighted=float(torch.as_tensor(term).detach()),
            )
        )
    if total is None:
        raise ValueError("no units to train")
    return torch.as_tensor(total), breakdown


def bundle_outputs(bundle) -> list[tuple[torch.Tensor, str, torch.Tensor | None]]:
    """(embedding, role, logits) triples from an EmbeddingBundle."""
    return list(bundle)


__all__ = [
    "LossWeights",
    "UnitLoss",
    "batch_hard_triplet",
    "bundle_outputs",
    "ce_label_smoothing",
    "lbs_total",
    "pairwise_euclidean",
    "smoothed_targets",
]
