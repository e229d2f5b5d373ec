"""Training losses: per-domain prompt loss, adapter weight loss, adapted-prompt
loss, and their weighted combination.

The adapter is always fed the prompt-free class-token feature through a
stop-gradient, so no gradient reaches the backbone through the adapter input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit
from .datagen import DomainBatch
from .prompting import AdapterParams, PromptBank, adapter_forward, compose_adapted_prompts, domain_prompts
from .tensor import Tensor

__all__ = ["LossBreakdown", "loss_adapt", "loss_erm", "loss_prompt", "loss_w", "total_loss"]

LOG_CLAMP = 1e-7


@dataclass
class LossBreakdown:
    """Scalar loss tensors plus the combination weight lambda."""

    l_prompt: Tensor
    l_w: Tensor
    l_adapt: Tensor
    lam: float
    total: Tensor

    def floats(self) -> tuple[float, float, float, float]:
        return (
            self.l_prompt.item(),
            self.l_w.item(),
            self.l_adapt.item(),
            self.total.item(),
        )

    def csv_row(self, step: int) -> str:
        lp, lw, la, tot = self.floats()
        return f"{step},{lp:.6f},{lw:.6f},{la:.6f},{tot:.6f}"

    CSV_HEADER = "step,l_prompt,l_w,l_adapt,total"


def loss_erm(params, cfg, batch: DomainBatch, train=False, rng=None) -> Tensor:
    """Plain pooled cross-entropy, no prompts."""
    _, logits = vit.forward(params, cfg, Tensor(batch.images), None, train, rng)
    return T.cross_entropy(logits, batch.labels)


def loss_prompt(params, cfg, bank: PromptBank, batch: DomainBatch, train=False, rng=None) -> Tensor:
    """Each sample forwarded with its own domain's prompts; mean over the batch."""
    n = len(batch)
    total = None
    for d in np.unique(batch.domains):
        if d >= bank.num_domains:
            raise IndexError(f"domain index {d} out of range [0, {bank.num_domains})")
        sel = np.flatnonzero(batch.domains == d)
        _, logits = vit.forward(
            params, cfg, Tensor(batch.images[sel]), domain_prompts(bank, int(d)), train, rng
        )
        part = T.cross_entropy(logits, batch.labels[sel]) * (len(sel) / n)
        total = part if total is None else total + part
    return total


def loss_w(weights: Tensor, true_domains) -> Tensor:
    """Binary cross-entropy on every weight entry, averaged over positions
    and domains: per sample (1/L) sum_j (1/K) [-log w_t[j] +
    sum_{d != t} -log(1 - w_d[j])], mean over the batch. Logs are clamped at
    1e-7 so underflowed weights stay finite.
    """
    b, length, k = weights.shape
    t = np.asarray(true_domains)
    hot = np.zeros((b, 1, k), dtype=weights.dtype)
    hot[np.arange(b), 0, t] = 1.0
    hot = Tensor(np.broadcast_to(hot, (b, length, k)).copy())
    pos = hot * T.log(T.clamp_min(weights, LOG_CLAMP))
    neg = (1.0 - hot) * T.log(T.clamp_min(1.0 - weights, LOG_CLAMP))
    return T.tensor_sum(-(pos + neg)) * (1.0 / (b * length * k))


def loss_adapt(
    params,
    cfg,
    bank: PromptBank,
    adapter: AdapterParams,
    batch: DomainBatch,
    train=False,
    rng=None,
    base_feature: Tensor | None = None,
) -> Tensor:
    """Cross-entropy with adapted prompts composed from detached features.

    Gradients flow to backbone, classifier, adapter and bank, but never into
    the backbone through the adapter's input feature.
    """
    weights = _adapter_weights(params, cfg, adapter, batch, train, rng, base_feature)
    adapted = compose_adapted_prompts(bank, weights)
    _, logits = vit.forward(params, cfg, Tensor(batch.images), adapted, train, rng)
    return T.cross_entropy(logits, batch.labels)


def _adapter_weights(params, cfg, adapter, batch, train, rng, base_feature):
    if base_feature is None:
        feat, _ = vit.forward(params, cfg, Tensor(batch.images), None, train, rng)
        base_feature = feat
    return adapter_forward(adapter, T.detach(base_feature))


def total_loss(
    params,
    cfg,
    bank: PromptBank,
    adapter: AdapterParams,
    batch: DomainBatch,
    lam: float,
    train=False,
    rng=None,
) -> LossBreakdown:
    """One prompt-free forward (adapter input), one per-domain-prompt pass,
    one adapted-prompt pass; total = l_prompt + l_adapt + lambda * l_w."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    feat, _ = vit.forward(params, cfg, Tensor(batch.images), None, train, rng)
    weights = adapter_forward(adapter, T.detach(feat))

    l_p = loss_prompt(params, cfg, bank, batch, train, rng)
    l_w = loss_w(weights, batch.domains)
    adapted = compose_adapted_prompts(bank, weights)
    _, logits = vit.forward(params, cfg, Tensor(batch.images), adapted, train, rng)
    l_a = T.cross_entropy(logits, batch.labels)

    total = l_p + l_a + l_w * lam
    return LossBreakdown(l_prompt=l_p, l_w=l_w, l_adapt=l_a, lam=lam, total=total)
