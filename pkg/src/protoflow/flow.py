"""Invertible map from data space to latent space.

The flow is a stack of ``[actnorm -> fixed permutation -> affine coupling]``
blocks.  Every layer returns its exact log-abs-det Jacobian so that

    log p_X(x) = log p_Z(f(x)) + log |det df/dx|.
"""
from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, RngStream, as_rng


class ActNorm(nn.Module):
    """Per-dimension affine map ``z = x * exp(log_scale) + bias``."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.log_scale = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.register_buffer("initialized", torch.zeros((), dtype=DTYPE))

    def forward(self, x):
        z = x * torch.exp(self.log_scale) + self.bias
        return z, self.log_scale.sum().expand(x.shape[0])

    def inverse(self, z):
        return (z - self.bias) * torch.exp(-self.log_scale)

    def spec(self) -> dict:
        return {"type": "actnorm"}


def actnorm_init(layer: ActNorm, batch: torch.Tensor) -> None:
    """Data-dependent init: map ``batch`` to zero mean and unit variance."""
    batch = torch.as_tensor(batch, dtype=DTYPE)
    if batch.ndim != 2 or batch.shape[1] != layer.dim:
        raise ValueError(f"expected batch of shape (n, {layer.dim}), got {tuple(batch.shape)}")
    if batch.shape[0] < 2:
        raise ValueError("actnorm init needs at least 2 samples")
    mean = batch.mean(0)
    std = batch.std(0, unbiased=False)
    bad = torch.nonzero(std <= 0).flatten()
    if bad.numel():
        raise ValueError(f"degenerate dimension {int(bad[0])}")
    with torch.no_grad():
        layer.log_scale.copy_(-torch.log(std))
        layer.bias.copy_(-mean / std)
        layer.initialized.fill_(1.0)


class Permutation(nn.Module):
    """Fixed coordinate shuffle; volume preserving."""

    def __init__(self, perm: Sequence[int]):
        super().__init__()
        perm = torch.as_tensor(np.asarray(perm, dtype=np.int64))
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError("not a permutation")
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", torch.argsort(perm))
        self.dim = len(perm)

    def forward(self, x):
        return x[:, self.perm], x.new_zeros(x.shape[0])

    def inverse(self, z):
        return z[:, self.inv_perm]

    def spec(self) -> dict:
        return {"type": "permutation", "perm": [int(i) for i in self.perm]}


def _linear(n_in, n_out, rng: RngStream, zero=False) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, dtype=DTYPE)
    with torch.no_grad():
        if zero:
            layer.weight.zero_()
            layer.bias.zero_()
        else:
            bound = 1.0 / math.sqrt(n_in)
            layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, (n_out, n_in))))
            layer.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, n_out)))
    return layer


class AffineCoupling(nn.Module):
    """Affine coupling layer.

    Coordinates in ``cond_idx`` pass through unchanged and feed an MLP that
    produces a log-scale ``s`` and shift ``t`` for the remaining coordinates:
    ``z_B = x_B * exp(s) + t``.  ``s`` is soft-clamped to
    ``[-scale_clamp, scale_clamp]`` with ``scale_clamp * tanh(s / scale_clamp)``.
    The output layer starts at zero, so a fresh layer is the identity.
    """

    def __init__(self, dim: int, cond_idx: Sequence[int], width: int = 128,
                 scale_clamp: float = 2.0, rng=None):
        super().__init__()
        cond = sorted(int(i) for i in cond_idx)
        trans = [i for i in range(dim) if i not in set(cond)]
        if not cond or not trans:
            raise ValueError("coupling partition needs at least one dimension on each side")
        rng = as_rng(rng)
        self.dim = dim
        self.width = width
        self.scale_clamp = float(scale_clamp)
        self.register_buffer("cond_idx", torch.tensor(cond, dtype=torch.long))
        self.register_buffer("trans_idx", torch.tensor(trans, dtype=torch.long))
        self.net = nn.Sequential(
            _linear(len(cond), width, rng),
            nn.SiLU(),
            _linear(width, width, rng),
            nn.SiLU(),
            _linear(width, 2 * len(trans), rng, zero=True),
        )

    def _scale_shift(self, x_cond):
        h = self.net(x_cond)
        s_raw, t = h.chunk(2, dim=1)
        s = self.scale_clamp * torch.tanh(s_raw / self.scale_clamp)
        return s, t

    def forward(self, x):
        s, t = self._scale_shift(x[:, self.cond_idx])
        z = x.clone()
        z[:, self.trans_idx] = x[:, self.trans_idx] * torch.exp(s) + t
        return z, s.sum(1)

    def inverse(self, z):
        s, t = self._scale_shift(z[:, self.cond_idx])
        x = z.clone()
        x[:, self.trans_idx] = (z[:, self.trans_idx] - t) * torch.exp(-s)
        return x

    def spec(self) -> dict:
        return {
            "type": "coupling",
            "cond": [int(i) for i in self.cond_idx],
            "width": self.width,
            "scale_clamp": self.scale_clamp,
        }


class FlowModel(nn.Module):
    """Ordered composition of bijective layers on R^d."""

    def __init__(self, dim: int, layers: Sequence[nn.Module]):
        super().__init__()
        self.dim = int(dim)
        self.layers = nn.ModuleList(layers)

    def _check(self, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: expected (batch, {self.dim}), got {tuple(x.shape)}")
        return x

    def forward(self, x):
        """Return ``(z, logdet)`` with ``logdet[b] = log|det df/dx|`` at ``x[b]``."""
        h = self._check(x)
        logdet = h.new_zeros(h.shape[0])
        for i, layer in enumerate(self.layers):
            h, ld = layer(h)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite output in flow layer {i}")
            logdet = logdet + ld
        return h, logdet

    def inverse(self, z):
        h = self._check(z)
        for i in range(len(self.layers) - 1, -1, -1):
            h = self.layers[i].inverse(h)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite output in flow layer {i}")
        return h

    @torch.no_grad()
    def initialize(self, batch) -> None:
        """Run data-dependent actnorm init layer by layer on ``batch``."""
        h = self._check(batch)
        for layer in self.layers:
            if isinstance(layer, ActNorm):
                actnorm_init(layer, h)
            h, _ = layer(h)

    def layer_specs(self) -> List[dict]:
        return [layer.spec() for layer in self.layers]


def build_flow(dim: int, n_blocks: int = 8, width: int = 128,
               scale_clamp: float = 2.0, rng=None) -> FlowModel:
    """Blocks of ``[actnorm, random permutation, coupling]``.

    Couplings alternate between conditioning on the first and the second half
    of the (permuted) coordinates.  For ``dim == 1`` no coupling is possible
    and each block is a lone actnorm.
    """
    rng = as_rng(rng)
    layers: List[nn.Module] = []
    half = dim // 2
    for b in range(n_blocks):
        layers.append(ActNorm(dim))
        if dim < 2:
            continue
        layers.append(Permutation(rng.permutation(dim)))
        cond = range(half) if b % 2 == 0 else range(half, dim)
        layers.append(AffineCoupling(dim, cond, width, scale_clamp, rng.derive(b)))
    return FlowModel(dim, layers)


def flow_from_specs(dim: int, specs: Sequence[dict]) -> FlowModel:
    """Rebuild an (untrained) flow with the architecture described by ``specs``."""
    layers: List[nn.Module] = []
    for s in specs:
        kind = s["type"]
        if kind == "actnorm":
            layers.append(ActNorm(dim))
        elif kind == "permutation":
            layers.append(Permutation(s["perm"]))
        elif kind == "coupling":
            layers.append(AffineCoupling(dim, s["cond"], s["width"], s["scale_clamp"]))
        else:
            raise ValueError(f"unknown layer type {kind!r}")
    return FlowModel(dim, layers)


def identity_flow(dim: int) -> FlowModel:
    return FlowModel(dim, [ActNorm(dim)])


def log_px(model: FlowModel, head, x) -> torch.Tensor:
    """``log p_X(x)`` under the class-marginal latent density."""
    z, logdet = model(x)
    return head.log_marginal(z) + logdet


@torch.no_grad()
def embed(model: FlowModel, x, batch_size: int = 1024, with_logdet: bool = False):
    """Batched ``f(x)`` as numpy, optionally with the log-det terms."""
    x = np.asarray(x, dtype=np.float64)
    zs, lds = [], []
    for i in range(0, len(x), batch_size):
        z, ld = model(torch.from_numpy(x[i:i + batch_size]))
        zs.append(z.numpy())
        lds.append(ld.numpy())
    z = np.concatenate(zs) if zs else np.zeros((0, model.dim))
    if with_logdet:
        return z, (np.concatenate(lds) if lds else np.zeros(0))
    return z
