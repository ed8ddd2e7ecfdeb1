"""scikit-learn compatible front end."""
from __future__ import annotations

import copy
from dataclasses import asdict
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import metrics
from .data import CONTINUOUS, QUANTIZED, AugmentationSpec, Dataset, model_inputs
from .flow import FlowModel, build_flow, embed
from .head import PrototypeHead, prune
from .losses import LossWeights
from .numerics import RngStream
from .training import EmaState, TrainConfig, ema_modules, restore, train


class ProtoFlowClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Invertible prototypical classifier.

    A normalizing flow maps inputs to a latent space where every class is a
    mixture of ``n_prototypes`` diagonal Gaussians.  ``transform`` returns
    latent codes, ``inverse_transform`` maps latents back to inputs and
    ``score_samples`` gives exact log-densities.

    Set ``quantized=True`` for 8-bit data (values in [0, 255]); it is then
    dequantized into logit space before entering the flow, and
    ``inverse_transform`` returns that space.
    """

    def __init__(self, n_prototypes=10, n_blocks=8, hidden_width=128, scale_clamp=2.0,
                 lr=1e-4, batch_size=128, epochs=150, warmup_epochs=5, max_grad_norm=100.0,
                 weight_decay=1e-5, lambda_cr=1.0, lambda_div=1.0, lambda_elbo=1.0,
                 cr_rampup_epochs=50, cr_target="model", ema_decay=0.999, use_ema=True,
                 pretrain_epochs=0, pretrain_lr=None, kmeans_init=True, kmeans_iters=25,
                 augmentation=None, image_shape=None, quantized=False, class_prior=None,
                 val_fraction=0.0, random_state=0):
        self.n_prototypes = n_prototypes
        self.n_blocks = n_blocks
        self.hidden_width = hidden_width
        self.scale_clamp = scale_clamp
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.max_grad_norm = max_grad_norm
        self.weight_decay = weight_decay
        self.lambda_cr = lambda_cr
        self.lambda_div = lambda_div
        self.lambda_elbo = lambda_elbo
        self.cr_rampup_epochs = cr_rampup_epochs
        self.cr_target = cr_target
        self.ema_decay = ema_decay
        self.use_ema = use_ema
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.kmeans_init = kmeans_init
        self.kmeans_iters = kmeans_iters
        self.augmentation = augmentation
        self.image_shape = image_shape
        self.quantized = quantized
        self.class_prior = class_prior
        self.val_fraction = val_fraction
        self.random_state = random_state

    # -- configuration --------------------------------------------------------
    def train_config(self) -> TrainConfig:
        aug = self.augmentation
        if aug is None:
            aug = AugmentationSpec.identity()
        elif isinstance(aug, dict):
            aug = AugmentationSpec(**aug)
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            warmup_epochs=self.warmup_epochs, max_grad_norm=self.max_grad_norm,
            weight_decay=self.weight_decay, n_prototypes=self.n_prototypes,
            cr_rampup_epochs=self.cr_rampup_epochs, ema_decay=self.ema_decay,
            seed=int(self.random_state or 0), pretrain_epochs=self.pretrain_epochs,
            pretrain_lr=self.pretrain_lr, kmeans=self.kmeans_init,
            kmeans_iters=self.kmeans_iters, cr_target=self.cr_target,
            weights=LossWeights(self.lambda_cr, self.lambda_div, self.lambda_elbo),
            augmentation=aug,
        )

    def _dataset(self, X, y=None) -> Dataset:
        labels = np.zeros(len(X), dtype=np.int64) if y is None else y
        n_classes = len(self.classes_) if hasattr(self, "classes_") else int(labels.max()) + 1
        return Dataset(X, labels, n_classes, self.image_shape,
                       QUANTIZED if self.quantized else CONTINUOUS)

    def _build(self, n_features: int, n_classes: int):
        rng = RngStream(int(self.random_state or 0), 100)
        model = build_flow(n_features, self.n_blocks, self.hidden_width, self.scale_clamp,
                           rng.derive(0))
        head = PrototypeHead(n_classes, self.n_prototypes, n_features, self.class_prior,
                             rng.derive(1))
        return model, head

    # -- fitting --------------------------------------------------------------
    def fit(self, X, y, eval_set=None):
        """Train on ``(X, y)``.

        Args:
            eval_set: optional ``(X_val, y_val)`` monitored every epoch (accuracy
                and bits per dimension).  Overrides ``val_fraction``.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        data = self._dataset(X, y_enc)
        val = None
        if eval_set is not None:
            Xv, yv = check_X_y(*eval_set, dtype=np.float64)
            if not np.isin(yv, self.classes_).all():
                raise ValueError("eval_set has labels not seen in y")
            val = self._dataset(Xv, np.searchsorted(self.classes_, yv))
        elif self.val_fraction:
            data, val = data.split(self.val_fraction, RngStream(int(self.random_state or 0), 7))
        model, head = self._build(X.shape[1], len(self.classes_))
        result = train(model, head, data, self.train_config(), val=val, eval_ema=self.use_ema)
        self.model_, self.head_, self.ema_ = result.model, result.head, result.ema
        self.history_ = result.epochs
        self.log_ = result.log
        self.pretrain_history_ = result.pretrain_history
        self.best_state_ = result.best_state
        self._refresh()
        return self

    def _refresh(self):
        if self.use_ema:
            self.eval_model_, self.eval_head_ = ema_modules(self.model_, self.head_, self.ema_)
            self.eval_head_.active.copy_(self.head_.active)
        else:
            self.eval_model_, self.eval_head_ = self.model_, self.head_

    @classmethod
    def from_modules(cls, model: FlowModel, head: PrototypeHead, ema: Optional[EmaState] = None,
                     classes=None, **params) -> "ProtoFlowClassifier":
        est = cls(**params)
        est.model_, est.head_ = model, head
        est.ema_ = ema if ema is not None else EmaState(
            {**{f"flow.{k}": v for k, v in model.named_parameters()},
             **{f"head.{k}": v for k, v in head.named_parameters()}}, est.ema_decay)
        est.classes_ = np.arange(head.n_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = model.dim
        est._refresh()
        return est

    # -- inference ------------------------------------------------------------
    def _inputs(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return model_inputs(self._dataset(X))

    def predict_log_proba(self, X):
        x, _ = self._inputs(X)
        return metrics.log_posteriors(self.eval_model_, self.eval_head_, x)

    def predict_proba(self, X):
        return np.exp(self.predict_log_proba(X))

    def predict(self, X):
        idx = self.predict_log_proba(X).argmax(1)
        return self.classes_[idx]

    def transform(self, X):
        x, _ = self._inputs(X)
        return embed(self.eval_model_, x)

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        Z = check_array(Z, dtype=np.float64)
        with torch.no_grad():
            return self.eval_model_.inverse(torch.from_numpy(Z)).numpy()

    def score_samples(self, X):
        """Log-density of each sample (8-bit units for quantized data)."""
        x, offset = self._inputs(X)
        z, logdet = embed(self.eval_model_, x, with_logdet=True)
        with torch.no_grad():
            return self.eval_head_.log_marginal(torch.from_numpy(z)).numpy() + logdet + offset

    def most_likely_prototypes(self, X):
        from .head import most_likely_prototype
        return most_likely_prototype(self.eval_head_, self.transform(X))

    def prune(self, bins: int = 256):
        """Otsu-prune prototypes of the evaluation head; returns the per-component report."""
        check_is_fitted(self, "model_")
        records = prune(self.eval_head_, bins)
        self.head_.active.copy_(self.eval_head_.active)
        return records
