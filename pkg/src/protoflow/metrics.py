"""Evaluation metrics for a trained flow + prototype head."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .data import Dataset, model_inputs
from .flow import FlowModel, embed
from .head import PrototypeHead, most_likely_prototype
from .losses import modified_hellinger_sq
from .numerics import as_rng


@torch.no_grad()
def log_posteriors(model: FlowModel, head: PrototypeHead, x, batch_size: int = 1024) -> np.ndarray:
    z = embed(model, x, batch_size)
    return head.log_posterior(torch.from_numpy(z)).numpy()


def predict(model, head, dataset: Dataset) -> np.ndarray:
    x, _ = model_inputs(dataset)
    return log_posteriors(model, head, x).argmax(1)


def accuracy(model, head, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict(model, head, dataset) == dataset.labels))


@torch.no_grad()
def bpd(model, head, dataset: Dataset, rng=None) -> float:
    """Mean bits per dimension.  Quantized data is dequantized with ``rng``."""
    x, offset = model_inputs(dataset, as_rng(rng) if dataset.value_domain != "continuous" else None)
    z, logdet = embed(model, x, with_logdet=True)
    log_px = head.log_marginal(torch.from_numpy(z)).numpy() + logdet
    return float(np.mean(-(log_px + offset) / (dataset.dim * math.log(2.0))))


def calibration_errors(confidences, correct, bins: int = 15) -> Tuple[float, float]:
    """ECE and MCE from max-class confidences and 0/1 correctness.

    Equal-width bins over (0, 1]; a confidence ``p`` lands in bin
    ``ceil(p * bins) - 1`` (0 goes to the first bin).
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=np.float64).ravel()
    n = conf.size
    if n == 0:
        return 0.0, 0.0
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=bins)
    nonempty = counts > 0
    gaps = np.abs(acc_sum[nonempty] / counts[nonempty] - conf_sum[nonempty] / counts[nonempty])
    ece = float(np.sum(counts[nonempty] / n * gaps))
    mce = float(gaps.max())
    return ece, mce


def calibration(model, head, dataset: Dataset, bins: int = 15) -> Tuple[float, float]:
    x, _ = model_inputs(dataset)
    post = np.exp(log_posteriors(model, head, x))
    return calibration_errors(post.max(1), post.argmax(1) == dataset.labels, bins)


def _ml_prototypes(model, head, x) -> np.ndarray:
    ck = most_likely_prototype(head, embed(model, x))
    return ck[:, 0] * head.n_prototypes + ck[:, 1]


def robustness_score(model, head, dataset: Dataset, s: float = 0.2, rng=None,
                     draws: int = 1) -> float:
    """Fraction of (sample, draw) pairs whose most likely prototype survives
    additive ``N(0, s^2 I)`` noise in the flow's input space."""
    if s < 0:
        raise ValueError("s must be >= 0")
    rng = as_rng(rng)
    x, _ = model_inputs(dataset)
    base = _ml_prototypes(model, head, x)
    if s == 0:
        return 1.0
    hits = 0
    for _ in range(draws):
        noisy = x + rng.normal(0.0, s, x.shape)
        hits += int(np.sum(_ml_prototypes(model, head, noisy) == base))
    return hits / (draws * len(x))


def assignment_entropy_score(assignments, n_prototypes_total: int) -> float:
    """Entropy of the empirical assignment distribution over ``log(total)``."""
    a = np.asarray(assignments).ravel()
    if a.size == 0 or n_prototypes_total < 2:
        return 0.0
    _, counts = np.unique(a, return_counts=True)
    q = counts / a.size
    return float(-np.sum(q * np.log(q)) / math.log(n_prototypes_total))


def diversity_score(model, head, dataset: Dataset) -> float:
    x, _ = model_inputs(dataset)
    return assignment_entropy_score(_ml_prototypes(model, head, x),
                                    head.n_classes * head.n_prototypes)


def nearest_prototype_distances(model, head, dataset: Dataset):
    """Euclidean latent distance from each sample to its closest active mean.

    Returns ``(distances, quartiles)`` with quartiles at 25/50/75%.
    """
    x, _ = model_inputs(dataset)
    z = embed(model, x)
    active = head.active.numpy()
    mu = head.means.detach().numpy()[active]
    d2 = (z * z).sum(1)[:, None] - 2.0 * z @ mu.T + (mu * mu).sum(1)[None]
    dist = np.sqrt(np.maximum(d2.min(1), 0.0))
    return dist, np.percentile(dist, [25, 50, 75]) if dist.size else np.full(3, np.nan)


@torch.no_grad()
def pairwise_hellinger_matrix(head: PrototypeHead):
    """Modified squared Hellinger divergence between all active components.

    Returns ``(matrix, ids)`` where ``ids[a] = (c, k)`` labels row/column a.
    """
    ids = head.active_pairs()
    idx = torch.tensor(ids, dtype=torch.long).reshape(-1, 2)
    mu = head.means[idx[:, 0], idx[:, 1]]
    lv = head.clamped_log_var()[idx[:, 0], idx[:, 1]]
    m = modified_hellinger_sq(mu[:, None], lv[:, None], mu[None], lv[None]).numpy()
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 0.0)
    return m, ids


@dataclass
class EvalReport:
    accuracy: float
    bpd: float
    ece: float
    mce: float
    s_rob: float
    s_div: float
    n_eval: int
    config: Dict = field(default_factory=dict)
    per_class_accuracy: Optional[List[float]] = None

    FIELDS = ("accuracy", "bpd", "ece", "mce", "s_rob", "s_div", "n_eval")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        w.writerow([getattr(self, f) for f in self.FIELDS])
        return buf.getvalue()


def evaluate(model, head, dataset: Dataset, bins: int = 15, s: float = 0.2, seed: int = 0,
             per_class: bool = False) -> EvalReport:
    """Full metric suite on ``dataset``; deterministic given ``seed``."""
    pred = predict(model, head, dataset)
    ece, mce = calibration(model, head, dataset, bins)
    per = None
    if per_class:
        per = [float(np.mean(pred[dataset.labels == c] == c)) if np.any(dataset.labels == c)
               else float("nan") for c in range(dataset.num_classes)]
    return EvalReport(
        accuracy=float(np.mean(pred == dataset.labels)),
        bpd=bpd(model, head, dataset, rng=as_rng(seed).derive(1)),
        ece=ece, mce=mce,
        s_rob=robustness_score(model, head, dataset, s, as_rng(seed).derive(2)),
        s_div=diversity_score(model, head, dataset),
        n_eval=len(dataset),
        config={"bins": bins, "s": s, "seed": seed},
        per_class_accuracy=per,
    )
