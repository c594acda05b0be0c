"""Loss functions for the three-player censoring game.

The owner descends lam * utility_loss + sample_loss - privacy_loss on the
censor parameters (ascending the attacker's loss), the attacker separately
descends its own loss on its parameters, and the user descends the utility
loss. The attacker loss blends cross entropy on the sensitive label with a
contrastive term over attacker embeddings whose adversarial direction pushes
same-sensitive-class pairs apart and pulls different-class pairs together.
"""

from __future__ import annotations

import dataclasses
import math

import torch

from . import geometry
from .censor import SamplerOutput
from .nets import BackboneNet, classify, encode

DEFAULT_MARGIN = 10.0


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    """One training step's losses; total_owner = lam*l_util - l_priv + l_sample."""

    step: int
    l_util: float
    l_priv: float
    l_cce_attacker: float
    l_aco: float
    l_sample: float
    total_owner: float

    CSV_FIELDS = ("step", "l_util", "l_priv", "l_cce_attacker",
                  "l_aco", "l_sample", "total_owner")

    def csv_row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f)) for f in self.CSV_FIELDS[1:])


def cce(logits: torch.Tensor, label) -> torch.Tensor:
    """Cross entropy -log softmax(logits)[label], stabilized by max subtraction.

    Accepts a single (C,) logit vector with an int label, or a (B, C) batch
    with a (B,) label tensor (returns per-sample losses).
    """
    z = logits - logits.max(dim=-1, keepdim=True).values
    lse = torch.logsumexp(z, dim=-1)
    if logits.ndim == 1:
        return lse - z[int(label)]
    idx = torch.as_tensor(label, dtype=torch.int64)
    return lse - z.gather(-1, idx.unsqueeze(-1)).squeeze(-1)


def aco(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor,
        margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Contrastive embedding loss ||a-p||^2 - min(||a-n||, margin)^2.

    Positive/negative are chosen by the sensitive label (same / different).
    The attacker minimizes this; the owner maximizes it inside the privacy
    loss, collapsing sensitive-class structure in the attacker's embedding.
    The margin caps the negative term so the attacker's objective is bounded
    below. Accepts single vectors or (B, F) batches.
    """
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ValueError("anchor, positive, negative must have equal shapes")
    d_pos2 = ((anchor - positive) ** 2).sum(dim=-1)
    d_neg = torch.linalg.vector_norm(anchor - negative, dim=-1)
    return d_pos2 - torch.clamp(d_neg, max=margin) ** 2


def attacker_loss(attacker: BackboneNet, censored, pos_cloud, neg_cloud,
                  y_s: int, alpha: float, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Blended attacker objective on one censored cloud.

    alpha * cce(classify(censored), y_s)
      + (1 - alpha) * aco(encode(censored), encode(pos), encode(neg)),
    all encodings through the attacker backbone.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    l_cce = cce(classify(attacker, censored), y_s)
    l_aco = aco(encode(attacker, censored), encode(attacker, pos_cloud),
                encode(attacker, neg_cloud), margin=margin)
    return alpha * l_cce + (1.0 - alpha) * l_aco


def attacker_losses_batch(attacker: BackboneNet, censored: torch.Tensor,
                          y_s: torch.Tensor, pos_idx, neg_idx,
                          alpha: float, margin: float = DEFAULT_MARGIN) -> tuple:
    """Batch-mean attacker loss with positives/negatives drawn from the batch.

    Encodes the censored batch once and indexes anchor/positive/negative
    features out of it. Returns (l_a, l_cce, l_aco) batch means.
    """
    feats = attacker.encode(censored)
    logits = attacker.head(feats)
    l_cce = cce(logits, y_s).mean()
    pos = torch.as_tensor(pos_idx, dtype=torch.int64)
    neg = torch.as_tensor(neg_idx, dtype=torch.int64)
    l_aco = aco(feats, feats[pos], feats[neg], margin=margin).mean()
    return alpha * l_cce + (1.0 - alpha) * l_aco, l_cce, l_aco


def utility_loss(user: BackboneNet, censored, y_t) -> torch.Tensor:
    """Cross entropy of the user proxy on the task label."""
    return cce(classify(user, censored), y_t)


def sample_loss(sampler_out: SamplerOutput, reference, gamma: float = 1.0,
                beta: float = 1.0) -> torch.Tensor:
    """Soft-projection stability loss for the sampler.

    Chamfer terms keep the raw generated points on the input surface; the
    temperature penalty anneals the soft projection toward hard selection.
    """
    ref = geometry.as_tensor(reference, sampler_out.raw.dtype)
    avg, mx = geometry.chamfer_terms(sampler_out.raw, ref)
    return avg + gamma * mx + beta * sampler_out.temperature ** 2


def sample_loss_from_terms(terms, gamma: float = 1.0, beta: float = 1.0) -> torch.Tensor:
    """Same composition over precomputed (avg, max, temperature^2) terms."""
    avg, mx, t2 = terms
    return (avg + gamma * mx).mean() + beta * t2


def owner_objective(l_util, l_priv, l_sample, lam: float):
    """Scalar the owner descends on the censor parameters."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return lam * l_util - l_priv + l_sample
