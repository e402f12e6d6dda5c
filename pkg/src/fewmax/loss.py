"""Contrastive losses: anchor distillation, mixed-pair task loss, worst-case composite.

Every embedding is assumed unit-normalized, so similarities are cosines and
logits stay inside ``[-1/tau, 1/tau]``.  All log-softmax terms go through
``logsumexp``.

Batched shapes used throughout:

* ``z``      ``(B, D)``     task network on clean samples, f(x)
* ``za``     ``(B, D)``     anchor network on clean samples, f_a(x)
* ``zhat``   ``(B, M, D)``  task network on the M blends of each sample
* ``partners`` ``(B, M)``   blend partner index j
* ``lams``   ``(B, M)``     realized mixing coefficient
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import CapacityError, DimensionError, ParameterError

TAU = 0.07


@dataclass(frozen=True)
class NegativePolicy:
    mode: str = "in_batch"
    # drop the blend partner j from the negatives of a blended sample
    exclude_partner: bool = True

    def __post_init__(self):
        if self.mode != "in_batch":
            raise ParameterError(f"unsupported negative mode {self.mode!r}")


@dataclass
class LossBreakdown:
    l_cl: torch.Tensor  # (B,)
    l_task: torch.Tensor  # (B, M)
    m_star: np.ndarray  # (B,)
    total: torch.Tensor  # scalar

    @property
    def l_task_selected(self):
        idx = torch.as_tensor(self.m_star, device=self.l_task.device)
        return self.l_task.gather(1, idx[:, None])[:, 0]

    def summary(self):
        return {
            "loss": float(self.total.detach()),
            "l_cl": float(self.l_cl.detach().mean()),
            "l_task_selected": float(self.l_task_selected.detach().mean()),
        }


def _check_tau(tau):
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def similarity_logits(a, bank, tau=TAU):
    """``bank @ a / tau``: one logit per bank row."""
    _check_tau(tau)
    return bank @ a / tau


def _neg_log_softmax_first(pos_logit, neg_logits):
    logits = torch.cat([pos_logit.reshape(1), neg_logits.reshape(-1)])
    return torch.logsumexp(logits, dim=0) - pos_logit


def anchor_contrastive_loss(f_x, fa_x, fa_negs, tau=TAU):
    """Single-sample distillation loss against the frozen anchor.

    Positive: ``f(x_i) . f_a(x_i)``; negatives: ``f(x_i) . f_a(x_k)``.
    """
    _check_tau(tau)
    if len(fa_negs) == 0:
        raise CapacityError("anchor contrastive loss needs at least one negative")
    fa_negs = torch.as_tensor(fa_negs) if not torch.is_tensor(fa_negs) else fa_negs
    return _neg_log_softmax_first(f_x @ fa_x / tau, fa_negs @ f_x / tau)


def task_contrastive_loss(f_xhat, f_xi, f_xj, f_negs, lam, tau=TAU):
    """Single-sample mixed-pair loss: ``lam * CE_i + (1 - lam) * CE_j``.

    Positives pair the blend with both of its sources; negatives pair the
    blend with ``f_negs``.
    """
    _check_tau(tau)
    if not 0.0 <= float(lam) <= 1.0:
        raise ParameterError(f"lam must lie in [0, 1], got {lam}")
    if len(f_negs) == 0:
        raise CapacityError("task contrastive loss needs at least one negative")
    neg = f_negs @ f_xhat / tau
    ce_i = _neg_log_softmax_first(f_xi @ f_xhat / tau, neg)
    ce_j = _neg_log_softmax_first(f_xj @ f_xhat / tau, neg)
    return lam * ce_i + (1.0 - lam) * ce_j


def anchor_loss_batch(z, za, tau=TAU):
    """Per-sample distillation loss with in-batch anchor negatives, ``(B,)``."""
    _check_tau(tau)
    if z.shape[0] < 2:
        raise CapacityError("anchor loss needs a batch of at least 2")
    logits = z @ za.T / tau
    return torch.logsumexp(logits, dim=1) - logits.diagonal()


def task_loss_batch(z, zhat, partners, lams, tau=TAU, negatives: Optional[NegativePolicy] = None):
    """Mixed-pair loss for every (sample, blend), ``(B, M)``.

    Negatives for blend ``(i, m)`` are the clean in-batch embeddings other
    than ``i`` (and other than the partner when ``exclude_partner``).
    """
    _check_tau(tau)
    negatives = negatives or NegativePolicy()
    B, M, D = zhat.shape
    if z.shape != (B, D):
        raise DimensionError(f"z has shape {tuple(z.shape)}, expected {(B, D)}")
    partners = torch.as_tensor(partners, dtype=torch.long, device=z.device)
    lams = torch.as_tensor(lams, dtype=z.dtype, device=z.device)
    if torch.any(lams < 0) or torch.any(lams > 1):
        raise ParameterError("lams must lie in [0, 1]")

    # sim[i, m, k] = f(xhat_{i,m}) . f(x_k) / tau
    sim = torch.einsum("imd,kd->imk", zhat, z) / tau
    idx = torch.arange(B, device=z.device)
    neg_mask = idx[None, None, :] != idx[:, None, None]
    neg_mask = neg_mask.expand(B, M, B).clone()
    if negatives.exclude_partner:
        neg_mask.scatter_(2, partners[..., None], False)
    if not bool(neg_mask.any(dim=2).all()):
        raise CapacityError("a blended sample has no negatives left; use a larger batch")

    neg_lse = torch.logsumexp(sim.masked_fill(~neg_mask, float("-inf")), dim=2)
    pos_i = sim[idx, :, idx]  # (B, M)
    pos_j = sim.gather(2, partners[..., None])[..., 0]
    ce_i = torch.logaddexp(pos_i, neg_lse) - pos_i
    ce_j = torch.logaddexp(pos_j, neg_lse) - pos_j
    return lams * ce_i + (1.0 - lams) * ce_j


def select_worst(l_task):
    """Index of the largest task loss per row; ties resolve to the lowest index."""
    # numpy.argmax is specified to return the first occurrence
    return np.argmax(l_task.detach().cpu().numpy(), axis=1)


def fewmax_loss(z, za, zhat, partners, lams, tau=TAU, negatives: Optional[NegativePolicy] = None) -> LossBreakdown:
    """Worst-of-M composite: ``mean_i [ L_CL(i) + max_m L_task(i, m) ]``.

    Passing ``za=None`` drops the anchor term (plain contrastive training).
    """
    l_task = task_loss_batch(z, zhat, partners, lams, tau, negatives)
    if za is None:
        l_cl = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
    else:
        l_cl = anchor_loss_batch(z, za, tau)
    m_star = select_worst(l_task)
    selected = l_task.gather(1, torch.as_tensor(m_star, device=z.device)[:, None])[:, 0]
    total = (l_cl + selected).mean()
    return LossBreakdown(l_cl=l_cl, l_task=l_task, m_star=m_star, total=total)
