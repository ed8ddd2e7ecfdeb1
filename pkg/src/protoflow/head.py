"""Per-class Gaussian mixtures over the latent space.

Each class ``c`` owns ``K`` diagonal Gaussian components (the prototypes) with
softmax-normalized weight logits.  The head is also the classifier: class
posteriors follow from Bayes' rule over the class mixtures.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import special
import torch
from torch import nn

from .numerics import DTYPE, as_rng

LOG_VAR_MIN = math.log(1e-6)
LOG_VAR_MAX = math.log(1e6)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PrototypeComponent:
    mean: np.ndarray
    log_var: np.ndarray
    weight_logit: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.log_var = np.clip(np.asarray(self.log_var, dtype=np.float64).ravel(),
                               LOG_VAR_MIN, LOG_VAR_MAX)
        if self.mean.shape != self.log_var.shape:
            raise ValueError("mean and log_var must have the same length")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


def log_component_density(comp: PrototypeComponent, z) -> float:
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.shape != comp.mean.shape:
        raise ValueError(f"dimension mismatch: {z.size} vs {comp.dim}")
    r = (z - comp.mean) ** 2 * np.exp(-comp.log_var)
    return float(-0.5 * np.sum(r + comp.log_var + LOG_2PI))


class PrototypeHead(nn.Module):
    """``C x K`` Gaussian prototypes acting as a generative classifier.

    Args:
        n_classes: number of classes ``C``.
        n_prototypes: components per class ``K``.
        dim: latent dimension.
        class_prior: optional class prior; uniform when omitted.
    """

    def __init__(self, n_classes: int, n_prototypes: int, dim: int,
                 class_prior: Optional[Sequence[float]] = None, rng=None,
                 init_scale: float = 1.0):
        super().__init__()
        rng = as_rng(rng)
        C, K = int(n_classes), int(n_prototypes)
        self.n_classes, self.n_prototypes, self.dim = C, K, int(dim)
        means = rng.normal(0.0, init_scale, (C, K, dim))
        self.means = nn.Parameter(torch.from_numpy(means))
        self.log_var = nn.Parameter(torch.zeros(C, K, dim, dtype=DTYPE))
        self.logits = nn.Parameter(torch.zeros(C, K, dtype=DTYPE))
        self.register_buffer("active", torch.ones(C, K, dtype=torch.bool))
        if class_prior is None:
            prior = np.full(C, 1.0 / C)
        else:
            prior = np.asarray(class_prior, dtype=np.float64)
            if prior.shape != (C,) or np.any(prior <= 0):
                raise ValueError("class_prior must be a positive vector of length C")
            prior = prior / prior.sum()
        self.register_buffer("log_prior", torch.from_numpy(np.log(prior)))

    # -- parameters ---------------------------------------------------------
    def clamped_log_var(self):
        return self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    def log_weights(self):
        """Log mixture weights: softmax over the active logits of each class."""
        masked = self.logits.masked_fill(~self.active, float("-inf"))
        return torch.log_softmax(masked, dim=1)

    def weights(self):
        return self.log_weights().exp()

    def component(self, c: int, k: int) -> PrototypeComponent:
        return PrototypeComponent(
            self.means[c, k].detach().numpy().copy(),
            self.clamped_log_var()[c, k].detach().numpy().copy(),
            float(self.logits[c, k].detach()),
        )

    def active_pairs(self) -> List[Tuple[int, int]]:
        return [tuple(ix) for ix in torch.nonzero(self.active).tolist()]

    # -- densities ----------------------------------------------------------
    def component_log_density(self, z):
        """``log N(z; mu_ck, Sigma_ck)`` for every component: shape (B, C, K).

        Inactive components are included; mask them with :meth:`log_weights`.
        """
        z = torch.as_tensor(z, dtype=DTYPE)
        if z.ndim == 1:
            z = z[None]
        if z.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: expected {self.dim}, got {z.shape[1]}")
        C, K, d = self.n_classes, self.n_prototypes, self.dim
        lv = self.clamped_log_var().reshape(C * K, d)
        iv = torch.exp(-lv)
        mu = self.means.reshape(C * K, d)
        # (z - mu)^2 / var expanded to keep the batch op a matmul
        quad = (z * z) @ iv.T - 2.0 * z @ (mu * iv).T + (mu * mu * iv).sum(1)
        quad = quad.clamp_min(0.0)
        out = -0.5 * (quad + lv.sum(1) + d * LOG_2PI)
        return out.reshape(-1, C, K)

    def class_log_likelihood(self, z):
        """``log p_Z(z | y=c)`` for every class: shape (B, C)."""
        return torch.logsumexp(self.component_log_density(z) + self.log_weights(), dim=2)

    def log_joint(self, z):
        return self.class_log_likelihood(z) + self.log_prior

    def log_marginal(self, z):
        return torch.logsumexp(self.log_joint(z), dim=1)

    def log_posterior(self, z):
        lj = self.log_joint(z)
        return lj - torch.logsumexp(lj, dim=1, keepdim=True)

    def posterior(self, z):
        return self.log_posterior(z).exp()

    def forward(self, z):
        return self.log_posterior(z)


def log_class_conditional(head: PrototypeHead, z, c: int) -> float:
    if not 0 <= c < head.n_classes:
        raise IndexError(f"class {c} out of range")
    if not bool(head.active[c].any()):
        raise ValueError(f"all components of class {c} are pruned")
    with torch.no_grad():
        return float(head.class_log_likelihood(z)[0, c])


def class_posterior(head: PrototypeHead, z) -> np.ndarray:
    with torch.no_grad():
        return head.posterior(z).numpy().squeeze(0) if np.ndim(z) == 1 else head.posterior(z).numpy()


def most_likely_prototype(head: PrototypeHead, z, weighted: bool = False) -> np.ndarray:
    """Index ``(c, k)`` of the active component of highest density at each z.

    Returns an int array of shape (B, 2).  Ties resolve to the smallest
    ``(c, k)`` in row-major order.  ``weighted`` multiplies by mixture weights.
    """
    with torch.no_grad():
        dens = head.component_log_density(z)
        if weighted:
            dens = dens + head.log_weights()
        dens = dens.masked_fill(~head.active, float("-inf"))
        flat = dens.reshape(dens.shape[0], -1).numpy()
    idx = np.argmax(flat, axis=1)  # first maximum on ties
    return np.stack(np.divmod(idx, head.n_prototypes), axis=1)


def kmeans_init(head: PrototypeHead, embeddings: Sequence[np.ndarray],
                iters: int = 25, rng=None) -> None:
    """Set each class mixture from k-means clusters of that class's embeddings.

    Means become centroids, variances the per-cluster variances (clamped) and
    weight logits the log cluster fractions.
    """
    from sklearn.cluster import KMeans

    rng = as_rng(rng)
    K = head.n_prototypes
    if len(embeddings) != head.n_classes:
        raise ValueError("need one embedding array per class")
    means = head.means.detach().numpy().copy()
    log_var = head.log_var.detach().numpy().copy()
    logits = head.logits.detach().numpy().copy()
    for c, emb in enumerate(embeddings):
        emb = np.asarray(emb, dtype=np.float64)
        if emb.shape[0] < K:
            raise ValueError(f"class {c} has {emb.shape[0]} embeddings, fewer than K={K}")
        if K == 1:
            labels = np.zeros(len(emb), dtype=int)
            centers = emb.mean(0, keepdims=True)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                km = KMeans(n_clusters=K, init="k-means++", n_init=1, max_iter=iters,
                            tol=0.0, algorithm="lloyd", random_state=rng.child_seed())
                km.fit(emb)
            labels, centers = km.labels_, km.cluster_centers_
        for k in range(K):
            members = emb[labels == k]
            means[c, k] = centers[k]
            var = members.var(0) if len(members) else np.ones(emb.shape[1])
            log_var[c, k] = np.clip(np.log(np.maximum(var, 1e-300)), LOG_VAR_MIN, LOG_VAR_MAX)
            logits[c, k] = math.log(max(len(members), 1) / len(emb))
    with torch.no_grad():
        head.means.copy_(torch.from_numpy(means))
        head.log_var.copy_(torch.from_numpy(log_var))
        head.logits.copy_(torch.from_numpy(logits))


def otsu_threshold(values, bins: int = 256) -> float:
    """Histogram edge that maximizes the between-class variance.

    Values are histogrammed into ``bins`` equal-width bins over
    ``[min, max]``; candidates are the interior edges.  Class means use the
    actual values in each bin.  Ties go to the lowest edge.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if v.size < 2 or v.min() == v.max():
        raise ValueError("degenerate histogram")
    edges = np.linspace(v.min(), v.max(), bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=v, minlength=bins)
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(sums)[:-1]
    n1 = v.size - n0
    s1 = v.sum() - s0
    valid = (n0 > 0) & (n1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        between = n0 * n1 * (s0 / n0 - s1 / n1) ** 2 / v.size**2
    between = np.where(valid, between, -np.inf)
    return float(edges[1:-1][int(np.argmax(between))])


@dataclass
class PruneRecord:
    c: int
    k: int
    weight: float
    kept: bool


def prune(head: PrototypeHead, bins: int = 256) -> List[PruneRecord]:
    """Deactivate prototypes whose mixture weight falls below an Otsu threshold.

    Weights of all active components are pooled; each class always keeps its
    highest-weight component.  Returns one record per component that was
    active before the call.  A degenerate weight histogram leaves the head
    untouched (with a warning).
    """
    with torch.no_grad():
        w = head.weights().numpy()
    active = head.active.numpy().copy()
    pooled = w[active]
    try:
        eps = otsu_threshold(pooled, bins)
    except ValueError as err:
        warnings.warn(f"pruning skipped: {err}")
        eps = -np.inf
    keep = active & (w >= eps)
    for c in range(head.n_classes):
        if active[c].any():
            best = int(np.argmax(np.where(active[c], w[c], -np.inf)))
            keep[c, best] = True
    head.active.copy_(torch.from_numpy(keep))
    return [PruneRecord(c, k, float(w[c, k]), bool(keep[c, k]))
            for c, k in zip(*np.nonzero(active))]


def sample_truncated(comp: PrototypeComponent, t: float, n: int, rng=None) -> np.ndarray:
    """Draw ``n`` samples, each coordinate within ``t`` standard deviations.

    Per-coordinate inverse-CDF sampling of the truncated standard normal;
    ``t = inf`` is plain Gaussian sampling.
    """
    if not t > 0:
        raise ValueError("truncation t must be positive")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = as_rng(rng)
    if np.isfinite(t):
        lo = special.ndtr(-t)
        u = rng.uniform(lo, 1.0 - lo, size=(n, comp.dim))
        eps = np.clip(special.ndtri(u), -t, t)
    else:
        eps = rng.normal(size=(n, comp.dim))
    return comp.mean + comp.std * eps
