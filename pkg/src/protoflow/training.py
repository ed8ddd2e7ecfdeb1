"""Gradient-descent training of the flow and prototype head."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import metrics
from .data import CONTINUOUS, AugmentationSpec, Dataset, augment_pair, dequantize, model_inputs
from .flow import FlowModel, embed
from .head import PrototypeHead, kmeans_init
from .losses import LossWeights, predict_classes, total_loss
from .numerics import DTYPE, RngStream, as_rng

logger = logging.getLogger(__name__)

CR_TARGETS = ("model", "ema", "label")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    schedule: str = "cosine"
    batch_size: int = 128
    epochs: int = 150
    warmup_epochs: float = 5
    max_grad_norm: float = 100.0
    weight_decay: float = 1e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    n_prototypes: int = 10
    cr_rampup_epochs: float = 50
    ema_decay: float = 0.999
    seed: int = 0
    pretrain_epochs: int = 0
    pretrain_lr: Optional[float] = None
    kmeans: bool = True
    kmeans_iters: int = 25
    cr_target: str = "model"
    weights: LossWeights = field(default_factory=LossWeights)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec.identity)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationSpec(**self.augmentation)
        self.betas = tuple(self.betas)
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.cr_target not in CR_TARGETS:
            raise ValueError(f"cr_target must be one of {CR_TARGETS}")
        for name in ("lr", "batch_size", "max_grad_norm", "n_prototypes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "warmup_epochs", "cr_rampup_epochs", "weight_decay",
                     "pretrain_epochs", "kmeans_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(config: TrainConfig, step: int, total_steps: int, warmup_steps: int = 0) -> float:
    """Linear warmup to ``config.lr`` then cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return config.lr * step / warmup_steps
    if config.schedule == "constant":
        return config.lr
    span = total_steps - warmup_steps
    if span <= 0:
        return config.lr
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lambda_cr_at(config: TrainConfig, epoch: float) -> float:
    if config.cr_rampup_epochs <= 0:
        return config.weights.cr
    return config.weights.cr * min(1.0, epoch / config.cr_rampup_epochs)


def clip_grad_norm(params: Iterable, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    ``params`` holds tensors or ``(name, tensor)`` pairs; names only feed the
    error raised for a non-finite gradient.  Returns the norm before clipping.
    """
    named = [p if isinstance(p, tuple) else (f"param[{i}]", p) for i, p in enumerate(params)]
    grads = [(name, p.grad) for name, p in named if p.grad is not None]
    sq = 0.0
    for name, g in grads:
        if not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient in {name}")
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    if norm > max_norm:
        for _, g in grads:
            g.mul_(max_norm / norm)
    return norm


class EmaState:
    """Exponential moving average of a set of named parameters."""

    def __init__(self, named_params: Dict[str, torch.Tensor], decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in named_params.items()}

    def update(self, named_params: Dict[str, torch.Tensor], decay: Optional[float] = None) -> None:
        ema_update(self, named_params, decay)

    def copy_to(self, module: torch.nn.Module, prefix: str = "") -> None:
        with torch.no_grad():
            for name, p in module.named_parameters():
                key = prefix + name
                if key in self.shadow:
                    p.copy_(self.shadow[key])


def ema_update(ema: EmaState, params: Dict[str, torch.Tensor], decay: Optional[float] = None) -> None:
    decay = ema.decay if decay is None else decay
    if set(params) != set(ema.shadow):
        raise ValueError("EMA parameter names do not match")
    with torch.no_grad():
        for k, p in params.items():
            s = ema.shadow[k]
            if s.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {tuple(s.shape)} vs {tuple(p.shape)}")
            s.mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def named_trainables(model: FlowModel, head: PrototypeHead) -> Dict[str, torch.Tensor]:
    out = {f"flow.{k}": v for k, v in model.named_parameters()}
    out.update({f"head.{k}": v for k, v in head.named_parameters()})
    return out


def make_optimizer(model: FlowModel, head: PrototypeHead, config: TrainConfig):
    # no weight decay on prototype parameters
    groups = [{"params": list(model.parameters()), "weight_decay": config.weight_decay}]
    if head is not None:
        groups.append({"params": list(head.parameters()), "weight_decay": 0.0})
    return torch.optim.AdamW(groups, lr=config.lr, betas=config.betas, eps=config.adam_eps)


def standard_normal_nll(model: FlowModel, x) -> torch.Tensor:
    z, logdet = model(x)
    d = z.shape[1]
    return (0.5 * (z * z).sum(1) + 0.5 * d * math.log(2 * math.pi) - logdet)


def pretrain_unconditional(model: FlowModel, data: Dataset, config: TrainConfig,
                           rng=None) -> List[float]:
    """Fit the flow alone to a standard-normal latent; returns per-epoch mean NLL."""
    history: List[float] = []
    if config.pretrain_epochs <= 0:
        return history
    rng = as_rng(rng)
    cfg = copy.copy(config)
    cfg.lr = config.pretrain_lr or config.lr
    opt = make_optimizer(model, None, cfg)
    n = len(data)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    total = steps_per_epoch * cfg.pretrain_epochs
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        perm = rng.permutation(n)
        acc = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            x, _ = model_inputs(data.subset(idx), rng)
            x = torch.from_numpy(x)
            for g in opt.param_groups:
                g["lr"] = lr_at(cfg, step + 1, total, 0)
            opt.zero_grad()
            loss = standard_normal_nll(model, x).mean()
            loss.backward()
            clip_grad_norm(model.named_parameters(), cfg.max_grad_norm)
            opt.step()
            acc += float(loss.detach())
            step += 1
        history.append(acc / steps_per_epoch)
    return history


@dataclass
class TrainResult:
    model: FlowModel
    head: PrototypeHead
    ema: EmaState
    log: List[dict]
    epochs: List[dict]
    pretrain_history: List[float]
    best_state: Optional[dict] = None


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: dict):
        super().__init__(message)
        self.last_good = last_good


def snapshot(model, head, ema) -> dict:
    return {
        "flow": copy.deepcopy(model.state_dict()),
        "head": copy.deepcopy(head.state_dict()),
        "ema": {k: v.clone() for k, v in ema.shadow.items()},
    }


def restore(model, head, ema, snap: dict) -> None:
    model.load_state_dict(snap["flow"])
    head.load_state_dict(snap["head"])
    ema.shadow = {k: v.clone() for k, v in snap["ema"].items()}


def ema_modules(model, head, ema: EmaState):
    """Copies of ``model`` and ``head`` carrying the EMA weights."""
    m, h = copy.deepcopy(model), copy.deepcopy(head)
    ema.copy_to(m, "flow.")
    ema.copy_to(h, "head.")
    return m, h


def default_evaluate(model: FlowModel, head: PrototypeHead, val: Dataset) -> dict:
    return {"val_acc": metrics.accuracy(model, head, val),
            "val_bpd": metrics.bpd(model, head, val, rng=0)}


def train(model: FlowModel, head: PrototypeHead, dataset: Dataset, config: TrainConfig,
          val: Optional[Dataset] = None,
          evaluate: Optional[Callable[[FlowModel, PrototypeHead, Dataset], dict]] = None,
          eval_ema: bool = True,
          epoch_callback: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Pretrain, k-means init, then minimize the total objective.

    The loop is deterministic for a given ``config.seed``.  ``evaluate``
    (called per epoch on ``val``) returns extra metrics merged into the epoch
    record; the state with the best ``val_acc`` is kept in ``best_state``.
    Without ``evaluate``, validation reports accuracy and bits per dimension.
    """
    if val is not None and evaluate is None:
        evaluate = default_evaluate
    root = RngStream(config.seed)
    init_rng, pre_rng, km_rng, loop_rng = (root.derive(i) for i in range(4))

    if len(dataset) < 2:
        raise ValueError("need at least two training samples")
    x_init, _ = model_inputs(dataset.subset(init_rng.permutation(len(dataset))[:2048]), init_rng)
    model.initialize(x_init)
    pre_hist = pretrain_unconditional(model, dataset, config, pre_rng)

    if config.kmeans:
        x_all, _ = model_inputs(dataset, km_rng)
        z_all = embed(model, x_all)
        kmeans_init(head, [z_all[dataset.labels == c] for c in range(head.n_classes)],
                    config.kmeans_iters, km_rng)

    opt = make_optimizer(model, head, config)
    ema = EmaState(named_trainables(model, head), config.ema_decay)
    n = len(dataset)
    bs = min(config.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    total = steps_per_epoch * config.epochs
    warmup = int(round(config.warmup_epochs * steps_per_epoch))
    image_shape = dataset.image_shape
    weights = config.weights

    log: List[dict] = []
    epochs: List[dict] = []
    best_acc, best_state = -1.0, None
    last_good = snapshot(model, head, ema)
    step = 0
    for epoch in range(config.epochs):
        perm = loop_rng.permutation(n)
        sums = np.zeros(5)
        for b in range(steps_per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            raw = dataset.samples[idx]
            x1, x2 = augment_pair(raw, config.augmentation, loop_rng, image_shape)
            if dataset.value_domain != CONTINUOUS:
                x1 = np.clip(x1, 0, 255)
                x2 = np.clip(x2, 0, 255)
                x1, _ = dequantize(x1, loop_rng)
                x2, _ = dequantize(x2, loop_rng)
            y = torch.from_numpy(dataset.labels[idx])
            x1, x2 = torch.from_numpy(x1), torch.from_numpy(x2)

            lam_cr = lambda_cr_at(config, epoch + b / steps_per_epoch)
            w = LossWeights(lam_cr, weights.div, weights.elbo)
            predictor = None
            if config.cr_target == "label":
                predictor = lambda _x, _y=y: _y
            elif config.cr_target == "ema":
                em, eh = ema_modules(model, head, ema)
                predictor = lambda _x, _m=em, _h=eh: predict_classes(_m, _h, _x)
            lr = lr_at(config, step + 1, total, warmup)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            report = total_loss(model, head, x1, x2, y, w, predictor)
            if not math.isfinite(report.total):
                restore(model, head, ema, last_good)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}", last_good)
            report.loss.backward()
            gnorm = clip_grad_norm(named_trainables(model, head).items(), config.max_grad_norm)
            opt.step()
            # bias-corrected warmup of the averaging horizon
            ema.update(named_trainables(model, head),
                       min(config.ema_decay, (1.0 + step) / (10.0 + step)))
            step += 1
            row = {"epoch": epoch, "step": step, "ce": report.ce, "cr": report.cr,
                   "div": report.div, "elbo": report.elbo, "total": report.total,
                   "lr": lr, "grad_norm": gnorm}
            log.append(row)
            sums += [report.ce, report.cr, report.div, report.elbo, report.total]

        rec = dict(zip(("ce", "cr", "div", "elbo", "total"), sums / steps_per_epoch))
        rec["epoch"] = epoch
        if val is not None and evaluate is not None:
            em, eh = ema_modules(model, head, ema) if eval_ema else (model, head)
            rec.update(evaluate(em, eh, val))
            if rec.get("val_acc", -1.0) > best_acc:
                best_acc = rec["val_acc"]
                best_state = snapshot(model, head, ema)
        if log:
            log[-1].update({k: v for k, v in rec.items() if k.startswith("val_")})
        epochs.append(rec)
        last_good = snapshot(model, head, ema)
        logger.info("epoch %d: %s", epoch, {k: round(float(v), 4) for k, v in rec.items()})
        if epoch_callback is not None:
            epoch_callback(epoch, rec)

    return TrainResult(model, head, ema, log, epochs, pre_hist, best_state)
