"""Numerical primitives shared by every module: stable reductions, seeded
random streams and the finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np
import torch

DTYPE = torch.float64


def logsumexp(v) -> float:
    """Return ``log(sum(exp(v)))`` without overflow."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty reduction")
    m = v.max()
    if np.isneginf(m):
        return float("-inf")
    return float(m + np.log(np.sum(np.exp(v - m))))


class RngStream:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's PCG64 seeded through ``SeedSequence`` with the stream id
    as spawn key, so streams with different ids are independent and a given
    pair reproduces the same sequence on every platform.
    """

    def __init__(self, seed: int = 0, stream_id: int | tuple = 0):
        self.seed = int(seed)
        self.stream_id = tuple(stream_id) if isinstance(stream_id, tuple) else (int(stream_id),)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def derive(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + (int(stream_id),))

    # thin pass-throughs used throughout the package
    def normal(self, *args, **kwargs):
        return self.generator.normal(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        return self.generator.uniform(*args, **kwargs)

    def permutation(self, n):
        return self.generator.permutation(n)

    def integers(self, *args, **kwargs):
        return self.generator.integers(*args, **kwargs)

    def child_seed(self) -> int:
        return int(self.generator.integers(0, 2**31 - 1))

    @property
    def state(self) -> dict:
        return self.generator.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self.generator.bit_generator.state = value

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def as_rng(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    return RngStream(int(rng))


def grad_check(
    f: Callable[[np.ndarray], float],
    theta,
    eps: float = 1e-4,
    grad=None,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    Args:
        f: scalar function of a flat parameter vector.
        theta: point at which to compare.
        eps: finite-difference step.
        grad: analytic gradient at ``theta``, either an array or a callable
            returning one.

    The relative error of coordinate ``i`` is
    ``|a_i - n_i| / max(|a_i|, |n_i|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    if callable(grad):
        grad = grad(theta.copy())
    analytic = np.asarray(grad, dtype=np.float64).ravel()
    if analytic.shape != theta.shape:
        raise ValueError("gradient shape does not match parameter vector")
    worst = 0.0
    for i in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[i] += eps
        tm[i] -= eps
        fp, fm = float(f(tp)), float(f(tm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


def torch_grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng=None,
) -> float:
    """:func:`grad_check` over torch parameters modified in place.

    ``loss_fn`` is re-evaluated after each perturbation; autograd supplies the
    analytic side.  ``max_coords`` subsamples coordinates per tensor.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = as_rng(rng)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.numel())
        if max_coords is not None and idx.size > max_coords:
            idx = np.sort(rng.generator.choice(idx, max_coords, replace=False))
        sub = idx.copy()
        orig = flat[sub].clone()

        def f(vals, _flat=flat, _sub=sub):
            _flat[_sub] = torch.as_tensor(vals, dtype=flat.dtype)
            with torch.no_grad():
                out = float(loss_fn())
            return out

        err = grad_check(f, orig.numpy(), eps, grad=gflat[sub].detach().numpy())
        flat[sub] = orig
        worst = max(worst, err)
    return worst
