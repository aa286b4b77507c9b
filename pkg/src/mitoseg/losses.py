"""Segmentation, consistency, domain and classification objectives.

Segmentation losses take logits of shape ``(N, C, H, W)`` and integer targets
of shape ``(N, H, W)`` where 255 marks ignored pixels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields, replace
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

IGNORE = 255
PART_NAMES = ("ce", "adice", "focal", "point_ce", "cont", "domain", "cls")


class BatchTooSmall(ValueError):
    pass


class NonFinitePart(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.4
    lambda2: float = 0.0
    w_cont: float = 0.5
    w_domain: float = 0.3
    cls_bce: float = 0.5
    cls_focal: float = 0.25
    focal_gamma: float = 2.0
    contrastive_tau: float = 0.5
    dice_epsilon: float = 1e-6

    @classmethod
    def for_track(cls, track: int, **overrides) -> "LossWeights":
        if track == 1:
            base = cls(lambda1=0.4, lambda2=0.0)
        elif track == 2:
            base = cls(lambda1=0.5, lambda2=1.0)
        else:
            raise ValueError(f"track must be 1 or 2, got {track}")
        return replace(base, **overrides)


@dataclass
class LossBreakdown:
    ce: float | torch.Tensor
    adice: float | torch.Tensor
    focal: float | torch.Tensor
    point_ce: float | torch.Tensor
    cont: float | torch.Tensor
    domain: float | torch.Tensor
    cls: float | torch.Tensor
    semi: float | torch.Tensor
    dg: float | torch.Tensor
    total: float | torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: _as_float(getattr(self, f.name)) for f in fields(self)}


def _as_float(v: float | torch.Tensor) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _zero_like(t: torch.Tensor) -> torch.Tensor:
    # keeps the graph connected so backward() on an all-ignored batch still works
    return t.sum() * 0.0


def _valid_logp_t(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor | None:
    """log-softmax probability of the target class at every non-ignored pixel."""
    logp = F.log_softmax(logits, dim=1)
    valid = target != IGNORE
    if not bool(valid.any()):
        return None
    safe = torch.where(valid, target, torch.zeros_like(target)).long()
    picked = logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    return picked[valid]


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    logp_t = _valid_logp_t(logits, target)
    if logp_t is None:
        logger.warning("ce_loss: every pixel is ignored")
        return _zero_like(logits)
    return -logp_t.mean()


def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    logp_t = _valid_logp_t(logits, target)
    if logp_t is None:
        logger.warning("focal_loss: every pixel is ignored")
        return _zero_like(logits)
    p_t = logp_t.exp()
    return (-(1 - p_t).pow(gamma) * logp_t).mean()


def adaptive_dice_loss(probs: torch.Tensor, target: torch.Tensor, epsilon: float = 1e-6) -> torch.Tensor:
    """Generalised Dice with batch-level weights ``1 / (n_c + eps)^2``.

    Weights are normalised to sum to one over the classes present in the
    batch, which makes the loss invariant to duplicating the batch. Absent
    classes get weight zero; ignored pixels drop out of every sum.
    """
    n_cls = probs.shape[1]
    valid = (target != IGNORE).unsqueeze(1).to(probs.dtype)
    safe = torch.where(target == IGNORE, torch.zeros_like(target), target).long()
    onehot = F.one_hot(safe, n_cls).permute(0, 3, 1, 2).to(probs.dtype) * valid
    p = probs * valid
    counts = onehot.sum(dim=(0, 2, 3))
    present = counts > 0
    if not bool(present.any()):
        return _zero_like(probs)
    w = torch.where(present, 1.0 / (counts + epsilon) ** 2, torch.zeros_like(counts))
    w = (w / w.sum()).detach()
    inter = (p * onehot).sum(dim=(0, 2, 3))
    union = (p + onehot).sum(dim=(0, 2, 3))
    return 1 - 2 * (w * inter).sum() / ((w * union).sum() + epsilon)


def point_ce_loss(logits: torch.Tensor, centroids: Sequence[Sequence[tuple[float, float, int]]]) -> torch.Tensor:
    """Mean CE at annotated centroid pixels; ``centroids[n]`` lists ``(x, y, class)`` for item ``n``."""
    logp = F.log_softmax(logits, dim=1)
    h, w = logits.shape[2:]
    picked = []
    for n, pts in enumerate(centroids):
        for x, y, cls in pts:
            j = min(max(int(math.floor(x)), 0), w - 1)
            i = min(max(int(math.floor(y)), 0), h - 1)
            picked.append(logp[n, int(cls), i, j])
    if not picked:
        return _zero_like(logits)
    return -torch.stack(picked).mean()


def contrastive_loss(emb_weak: torch.Tensor, emb_strong: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """NT-Xent over ``2N`` views; view ``i`` is positive with its other-augmentation twin."""
    n = emb_weak.shape[0]
    if n < 2:
        raise BatchTooSmall("contrastive loss needs at least 2 pairs")
    z = torch.cat([emb_weak, emb_strong], dim=0)
    sim = z @ z.T / tau
    eye = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(eye, float("-inf"))
    pos = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    return F.cross_entropy(sim, pos)


def domain_loss(domain_logits: torch.Tensor, domain_ids: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(domain_logits, domain_ids.long())


def _binary_terms(logits: torch.Tensor, labels: torch.Tensor, gamma: float):
    y = labels.to(logits.dtype)
    logp = F.logsigmoid(logits)
    log1mp = F.logsigmoid(-logits)
    logp_t = y * logp + (1 - y) * log1mp
    bce = -logp_t
    focal = -(1 - logp_t.exp()).pow(gamma) * logp_t
    return bce, focal


def cls_loss(logits: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0,
             bce_weight: float = 0.5, focal_weight: float = 0.25) -> torch.Tensor:
    """Class-balanced BCE + focal: ``0.5 (BCE+ + BCE-) + 0.25 (F+ + F-)``."""
    bce, focal = _binary_terms(logits, labels, gamma)
    pos = labels == 1
    neg = labels == 0
    total = _zero_like(logits)
    for name, sel in (("positive", pos), ("negative", neg)):
        if bool(sel.any()):
            total = total + bce_weight * bce[sel].mean() + focal_weight * focal[sel].mean()
        else:
            logger.warning("cls_loss: no %s samples in batch", name)
    return total


def combine(parts: Mapping[str, float | torch.Tensor], weights: LossWeights | None = None,
            track: int = 1) -> LossBreakdown:
    """Weighted sum of the seven parts into semi, DG and total losses."""
    weights = weights or LossWeights.for_track(track)
    vals = {}
    for name in PART_NAMES:
        v = parts.get(name, 0.0)
        if not math.isfinite(_as_float(v)):
            raise NonFinitePart(f"loss part {name!r} is {_as_float(v)}")
        vals[name] = v
    semi = vals["ce"] + vals["adice"] + vals["focal"] + weights.lambda1 * vals["point_ce"]
    dg = weights.w_cont * vals["cont"] + weights.w_domain * vals["domain"]
    total = semi + dg
    if weights.lambda2 != 0:
        total = total + weights.lambda2 * vals["cls"]
    return LossBreakdown(semi=semi, dg=dg, total=total, **vals)
