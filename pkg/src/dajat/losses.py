"""Training objectives: cross-entropy, KL, TRADES, multi-view JSD, and the
joint multi-view composite.

Probabilities are softmax outputs; every log is taken after flooring at
PROB_FLOOR so one-hot inputs stay finite. Reductions are batch means.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12


class LossShapeError(ValueError):
    """Mismatched clean/adversarial shapes or view/tag misalignment."""


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    return F.softmax(logits, dim=-1)


def kl_div(p: torch.Tensor, q: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    """KL(p || q) = sum_i p_i log(p_i / q_i), natural log, floored at PROB_FLOOR."""
    if p.shape != q.shape:
        raise LossShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    p = p.clamp(min=PROB_FLOOR)
    q = q.clamp(min=PROB_FLOOR)
    per_sample = (p * (p.log() - q.log())).sum(dim=-1)
    return per_sample.mean() if reduce else per_sample


def cross_entropy(logits: torch.Tensor, y: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    return F.cross_entropy(logits, y, reduction="mean" if reduce else "none")


def jsd(probs: list) -> torch.Tensor:
    """Mean KL of each distribution against the mixture M = mean of the list.

    Bounded by log K; zero when all inputs agree; permutation invariant.
    """
    if len(probs) == 0:
        raise LossShapeError("jsd needs at least one distribution")
    stacked = torch.stack(tuple(probs))
    mixture = stacked.mean(dim=0)
    terms = [kl_div(p, mixture) for p in probs]
    return torch.stack(terms).mean()


@dataclass
class LossBreakdown:
    """Composite loss with the pieces that built it (floats, for logging)."""

    total: torch.Tensor
    ce_term: float
    kl_term: float
    jsd_term: float = 0.0
    per_view: tuple = field(default_factory=tuple)

    def scalars(self) -> dict:
        return {
            "loss": float(self.total.detach()),
            "ce": self.ce_term,
            "kl": self.kl_term,
            "jsd": self.jsd_term,
        }


def trades_loss(model, x: torch.Tensor, x_adv: torch.Tensor, y: torch.Tensor,
                beta: float, tag: str = "base") -> LossBreakdown:
    """CE on the clean batch plus beta * KL(clean softmax || adversarial softmax)."""
    if x.shape != x_adv.shape:
        raise LossShapeError(f"clean/adversarial shapes differ: {x.shape} vs {x_adv.shape}")
    logits_clean = model(x, tag=tag)
    ce = cross_entropy(logits_clean, y)
    kl = kl_div(softmax_probs(logits_clean), softmax_probs(model(x_adv, tag=tag)))
    total = ce + beta * kl
    return LossBreakdown(total, float(ce.detach()), float(kl.detach()),
                         per_view=((float(ce.detach()), float(kl.detach())),))


def dajat_loss(model, views, adv_views, y: torch.Tensor, beta: float, lambda_js: float,
               view_weights=None) -> LossBreakdown:
    """Weighted TRADES terms over all views plus lambda_js * JSD of clean softmaxes.

    views: list of (tensor, tag); adv_views: matching list of (tensor, tag).
    Default weights are uniform 1/(T+1).
    """
    if len(views) != len(adv_views):
        raise LossShapeError(f"{len(views)} clean views vs {len(adv_views)} adversarial")
    if view_weights is None:
        view_weights = [1.0 / len(views)] * len(views)
    if len(view_weights) != len(views):
        raise LossShapeError("one weight per view required")

    clean_probs = []
    per_view = []
    total = None
    ce_sum = 0.0
    kl_sum = 0.0
    for (x, tag), (x_adv, adv_tag), weight in zip(views, adv_views, view_weights):
        if tag != adv_tag:
            raise LossShapeError(f"view tag {tag!r} paired with adversarial tag {adv_tag!r}")
        if x.shape != x_adv.shape:
            raise LossShapeError("clean/adversarial view shapes differ")
        logits_clean = model(x, tag=tag)
        probs_clean = softmax_probs(logits_clean)
        clean_probs.append(probs_clean)
        ce = cross_entropy(logits_clean, y)
        kl = kl_div(probs_clean, softmax_probs(model(x_adv, tag=tag)))
        term = weight * (ce + beta * kl)
        total = term if total is None else total + term
        ce_sum += weight * float(ce.detach())
        kl_sum += weight * float(kl.detach())
        per_view.append((float(ce.detach()), float(kl.detach())))

    consistency = jsd(clean_probs)
    total = total + lambda_js * consistency
    return LossBreakdown(total, ce_sum, kl_sum, float(consistency.detach()), tuple(per_view))
