"""Training objective: cross entropy plus consistency, diversity and
class-conditional likelihood terms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch

from .head import PrototypeHead
from .numerics import DTYPE


@dataclass
class LossWeights:
    cr: float = 1.0
    div: float = 1.0
    elbo: float = 1.0

    def __post_init__(self):
        for name in ("cr", "div", "elbo"):
            v = float(getattr(self, name))
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class LossReport:
    ce: float
    cr: float
    div: float
    elbo: float
    total: float
    loss: Optional[torch.Tensor] = None  # differentiable total


def cross_entropy(log_posterior: torch.Tensor, y) -> torch.Tensor:
    """Per-sample ``-log p(y | x)`` from log posteriors of shape (B, C)."""
    log_posterior = torch.as_tensor(log_posterior, dtype=DTYPE)
    if log_posterior.ndim == 1:
        log_posterior = log_posterior[None]
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if y.numel() and (y.min() < 0 or y.max() >= log_posterior.shape[1]):
        raise IndexError("label out of range")
    return -log_posterior.gather(1, y[:, None]).squeeze(1)


def _nll_given_class(model, head, x, y):
    z, logdet = model(x)
    cll = head.class_log_likelihood(z)
    return -(cll.gather(1, y[:, None]).squeeze(1) + logdet)


def consistency_loss(model, head: PrototypeHead, x_dot, x_ddot,
                     predictor: Optional[Callable] = None) -> torch.Tensor:
    """Per-sample ``-log p_X(x_dot | y_ddot)``.

    ``y_ddot`` is the argmax class for ``x_ddot``, with no gradient flowing
    through it.  ``predictor(x)`` overrides how it is obtained (e.g. the EMA
    model); by default the current model and head are used.
    """
    y_ddot = predict_classes(model, head, x_ddot) if predictor is None else predictor(x_ddot)
    y_ddot = torch.as_tensor(y_ddot, dtype=torch.long)
    return _nll_given_class(model, head, x_dot, y_ddot)


@torch.no_grad()
def predict_classes(model, head, x) -> torch.Tensor:
    z, _ = model(x)
    return head.log_posterior(z).argmax(1)


def modified_hellinger_sq(mean1, log_var1, mean2, log_var2) -> torch.Tensor:
    """Dimension-rescaled squared Hellinger divergence of diagonal Gaussians.

    ``1 - det(S1 S2)^(1/4d) / det(S)^(1/2d) * exp(-dmu' S^-1 dmu / 8d)`` with
    ``S = (S1 + S2) / 2``; determinants are evaluated as sums of logs.
    Broadcasts over leading dimensions; the last one is ``d``.
    """
    mean1, mean2 = torch.as_tensor(mean1, dtype=DTYPE), torch.as_tensor(mean2, dtype=DTYPE)
    lv1, lv2 = torch.as_tensor(log_var1, dtype=DTYPE), torch.as_tensor(log_var2, dtype=DTYPE)
    d = mean1.shape[-1]
    # det ratio per coordinate: sqrt(v1 v2) / ((v1 + v2) / 2) = 1 / cosh((lv1 - lv2) / 2)
    log_coef = -torch.log(torch.cosh(0.5 * (lv1 - lv2))).sum(-1) / (2 * d)
    var_avg = 0.5 * (torch.exp(lv1) + torch.exp(lv2))
    if not bool((var_avg > 0).all()):
        raise ValueError("non-positive variance")
    maha = ((mean1 - mean2) ** 2 / var_avg).sum(-1)
    return (1.0 - torch.exp(log_coef - maha / (8 * d))).clamp(0.0, 1.0)


def diversity_loss(head: PrototypeHead) -> torch.Tensor:
    """``-2 / (C K (K-1))`` times the summed within-class pairwise divergence.

    Pairs involving pruned components are skipped; ``K = 1`` gives 0.
    """
    C, K = head.n_classes, head.n_prototypes
    if K < 2:
        return head.means.sum() * 0.0
    i, j = torch.triu_indices(K, K, offset=1)
    lv = head.clamped_log_var()
    h = modified_hellinger_sq(head.means[:, i], lv[:, i], head.means[:, j], lv[:, j])
    mask = head.active[:, i] & head.active[:, j]
    total = torch.where(mask, h, torch.zeros_like(h)).sum()
    return -2.0 / (C * K * (K - 1)) * total


def elbo_loss(model, head: PrototypeHead, x, y) -> torch.Tensor:
    """Per-sample ``-log p_X(x | y)``."""
    return _nll_given_class(model, head, x, torch.as_tensor(y, dtype=torch.long))


def total_loss(model, head: PrototypeHead, x_dot, x_ddot, y, weights: LossWeights,
               predictor: Optional[Callable] = None) -> LossReport:
    """Batch-mean objective ``ce + w.cr * cr + w.div * div + w.elbo * elbo``.

    Cross entropy and the class-conditional NLL are evaluated on ``x_dot``;
    ``x_ddot`` only supplies the consistency target.  ``predictor`` maps
    ``x_ddot`` to target classes (defaults to the current model's argmax).
    """
    y = torch.as_tensor(y, dtype=torch.long)
    if predictor is None:
        y_ddot = predict_classes(model, head, x_ddot)
    else:
        y_ddot = torch.as_tensor(predictor(x_ddot), dtype=torch.long)
    z, logdet = model(x_dot)
    lj = head.log_joint(z)
    log_post = lj - torch.logsumexp(lj, dim=1, keepdim=True)
    cll = lj - head.log_prior
    ce = cross_entropy(log_post, y).mean()
    cr = -(cll.gather(1, y_ddot[:, None]).squeeze(1) + logdet).mean()
    elbo = -(cll.gather(1, y[:, None]).squeeze(1) + logdet).mean()
    div = diversity_loss(head)
    loss = ce + weights.cr * cr + weights.div * div + weights.elbo * elbo
    f = [float(t.detach()) for t in (ce, cr, div, elbo)]
    return LossReport(f[0], f[1], f[2], f[3],
                      f[0] + weights.cr * f[1] + weights.div * f[2] + weights.elbo * f[3],
                      loss)
