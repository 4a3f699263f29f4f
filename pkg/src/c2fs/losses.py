"""Training losses: coarse CE, within-coarse-class InfoNCE, reconstruction, alignment and their sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch

from . import substrate as ops


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    tie_alpha_beta: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative (alpha={self.alpha}, beta={self.beta})")
        if self.tie_alpha_beta and self.alpha != self.beta:
            raise ValueError("tie_alpha_beta requires alpha == beta")

    def set_alpha(self, value: float) -> None:
        self.alpha = value
        if self.tie_alpha_beta:
            self.beta = value
        self.__post_init__()


@dataclass
class LossReport:
    l_ce: float
    l_cont: float
    l_rec: float
    l_align: float
    total: float

    def as_dict(self):
        return asdict(self)


@dataclass
class ContrastiveState:
    """Per-coarse-class FIFO queues of unit-norm keys used as InfoNCE negatives."""

    queue_capacity: int = 4096
    temperature: float = 0.2
    queues: dict[int, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.queue_capacity <= 0 or self.temperature <= 0:
            raise ValueError("queue_capacity and temperature must be positive")

    def queue(self, label: int) -> Optional[torch.Tensor]:
        return self.queues.get(int(label))

    def enqueue(self, keys: torch.Tensor, labels: torch.Tensor) -> None:
        keys = keys.detach()
        for y in torch.unique(labels).tolist():
            new = keys[labels == y]
            old = self.queues.get(y)
            q = new if old is None else torch.cat([old, new])
            self.queues[y] = q[-self.queue_capacity:].clone()

    def __len__(self):
        return sum(len(q) for q in self.queues.values())


def loss_ce(logits: torch.Tensor, coarse_labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of the coarse head's logits."""
    return ops.softmax_cross_entropy(logits, coarse_labels)


def loss_cont(queries: torch.Tensor, keys: torch.Tensor, coarse_labels: torch.Tensor,
              state: ContrastiveState, update_queue: bool = True) -> torch.Tensor:
    """InfoNCE with the sample's own key as positive and its coarse class queue as negatives.

    Queries and keys are L2-normalized here; keys are treated as constants.
    A sample whose class queue is empty contributes ``-log 1 = 0``. The batch's
    keys are enqueued after the loss is formed.
    """
    if queries.shape != keys.shape:
        raise ops.ShapeError("loss_cont", queries.shape, keys.shape)
    q = ops.l2_normalize(queries)
    k = ops.l2_normalize(keys.detach())
    pos = (q * k).sum(dim=1) / state.temperature
    per_sample = torch.zeros_like(pos)
    for y in torch.unique(coarse_labels).tolist():
        sel = coarse_labels == y
        neg_bank = state.queue(y)
        if neg_bank is None or len(neg_bank) == 0:
            continue
        neg = (q[sel] @ neg_bank.to(q.dtype).T) / state.temperature
        logits = torch.cat([pos[sel, None], neg], dim=1)
        per_sample = per_sample.index_put((sel.nonzero().squeeze(1),),
                                          torch.logsumexp(logits, dim=1) - pos[sel])
    if update_queue:
        state.enqueue(k, coarse_labels)
    return per_sample.mean()


def loss_rec(reconstruction: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    return ops.mse(reconstruction, original)


def loss_align(rescaled: Sequence[torch.Tensor], reduction: str = "sum") -> torch.Tensor:
    """Sum over stages 2..4 of the squared L2 distance to the rescaled embedding.

    ``rescaled`` is ``(R2(f2), R3(f3), R4(f4), Rq(fq))``; distances are per
    sample, averaged over the batch. ``reduction="mean"`` divides each squared
    distance by the element count of one rescaled map (a per-element MSE).
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    *stages, zq = rescaled
    if len(stages) != 3:
        raise ValueError(f"loss_align expects 4 tensors, got {len(rescaled)}")
    total = 0.0
    for z in stages:
        if z.shape != zq.shape:
            raise ops.ShapeError("loss_align", z.shape, zq.shape)
        sq = ((z - zq) ** 2).flatten(1)
        per = sq.sum(dim=1) if reduction == "sum" else sq.mean(dim=1)
        total = total + per.mean()
    return total


def loss_total(l_ce, l_cont, l_rec, l_align, weights: LossWeights):
    """Weighted composite ``CE + cont + alpha * rec + beta * align``."""
    if weights.alpha < 0 or weights.beta < 0:
        raise ValueError("loss weights must be non-negative")
    total = ops.weighted_sum([l_ce, l_cont, l_rec, l_align], [1.0, 1.0, weights.alpha, weights.beta])
    f = lambda t: float(t.detach()) if torch.is_tensor(t) else float(t)
    report = LossReport(f(l_ce), f(l_cont), f(l_rec), f(l_align), f(total))
    return total, report
