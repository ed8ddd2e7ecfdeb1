import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from protoflow.flow import identity_flow
from protoflow.head import PrototypeHead
from protoflow.losses import (LossWeights, consistency_loss, cross_entropy, diversity_loss,
                              elbo_loss, modified_hellinger_sq, total_loss)
from protoflow.numerics import RngStream, grad_check, torch_grad_check

from conftest import random_flow, random_head


def hellinger_1d_numeric(m1, v1, m2, v2):
    """1/2 int (sqrt p - sqrt q)^2 by adaptive quadrature."""
    p, q = stats.norm(m1, math.sqrt(v1)), stats.norm(m2, math.sqrt(v2))
    lo = min(m1 - 12 * math.sqrt(v1), m2 - 12 * math.sqrt(v2))
    hi = max(m1 + 12 * math.sqrt(v1), m2 + 12 * math.sqrt(v2))
    f = lambda x: (math.sqrt(p.pdf(x)) - math.sqrt(q.pdf(x))) ** 2
    val, _ = integrate.quad(f, lo, hi, points=[m1, m2], limit=500, epsabs=1e-12, epsrel=1e-12)
    return 0.5 * val


def H(m1, v1, m2, v2):
    t = lambda a: torch.tensor(np.atleast_1d(np.asarray(a, float)))
    return float(modified_hellinger_sq(t(m1), torch.log(t(v1)), t(m2), torch.log(t(v2))))


def test_cross_entropy_examples():
    lp = torch.log(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64))
    assert float(cross_entropy(lp, [0])[0]) == 0.0
    uni = torch.full((1, 5), -math.log(5), dtype=torch.float64)
    assert float(cross_entropy(uni, [3])[0]) == pytest.approx(math.log(5), abs=1e-12)
    lp = torch.log(torch.tensor([[0.25, 0.75]], dtype=torch.float64))
    assert float(cross_entropy(lp, [0])[0]) == pytest.approx(1.386294, abs=1e-6)
    with pytest.raises(IndexError):
        cross_entropy(lp, [2])


def test_hellinger_examples():
    assert H([0.3, -1], [2, 0.5], [0.3, -1], [2, 0.5]) == 0.0
    assert H(0, 1, 2, 1) == pytest.approx(1 - math.exp(-0.5), abs=1e-12)
    assert H(0, 1, 2, 1) == pytest.approx(hellinger_1d_numeric(0, 1, 2, 1), abs=1e-8)
    assert H(0, 1, 1e4, 1) == pytest.approx(1.0, abs=1e-12)


def test_hellinger_vs_integration(rng):
    for _ in range(25):
        m1, m2 = rng.normal(0, 2, 2)
        v1, v2 = np.exp(rng.uniform(-2, 2, 2))
        assert H(m1, v1, m2, v2) == pytest.approx(hellinger_1d_numeric(m1, v1, m2, v2), abs=1e-4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10**6))
def test_hellinger_properties(d, seed):
    r = np.random.default_rng(seed)
    m1, m2 = r.normal(0, 3, (2, d))
    l1, l2 = r.uniform(-5, 5, (2, d))
    a = float(modified_hellinger_sq(m1, l1, m2, l2))
    b = float(modified_hellinger_sq(m2, l2, m1, l1))
    assert a == b
    assert 0.0 <= a <= 1.0
    assert float(modified_hellinger_sq(m1, l1, m1, l1)) == 0.0


def test_hellinger_grad_check(rng):
    m1, m2, l1, l2 = rng.normal(size=(4, 3))
    theta = np.concatenate([m1, l1, m2, l2])

    def f(t):
        return float(modified_hellinger_sq(*np.split(t, 4)))

    tt = torch.tensor(theta, requires_grad=True)
    a, b, c, e = torch.split(tt, 3)
    modified_hellinger_sq(a, b, c, e).backward()
    assert grad_check(f, theta, 1e-6, tt.grad.numpy()) < 1e-3


def test_diversity_examples():
    head = PrototypeHead(2, 3, 2)
    with torch.no_grad():
        head.means.copy_(head.means[:, :1].expand(-1, 3, -1))
    assert float(diversity_loss(head).detach()) == 0.0
    head = PrototypeHead(1, 2, 1)
    with torch.no_grad():
        head.means.copy_(torch.tensor([[[0.0], [1e4]]]))
    assert float(diversity_loss(head).detach()) == pytest.approx(-1.0, abs=1e-12)
    assert float(diversity_loss(PrototypeHead(3, 1, 2)).detach()) == 0.0


def test_diversity_hand_sum():
    head = random_head(2, 2, 3, seed=8)
    lv = head.clamped_log_var()
    hand = sum(float(modified_hellinger_sq(head.means[c, 0], lv[c, 0], head.means[c, 1], lv[c, 1]).detach())
               for c in range(2))
    assert float(diversity_loss(head).detach()) == pytest.approx(-2 / (2 * 2 * 1) * hand, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(2, 4), st.integers(1, 4), st.integers(0, 10**5),
       st.floats(0.1, 50))
def test_diversity_bounds(C, K, d, seed, spread):
    head = random_head(C, K, d, seed, spread)
    v = float(diversity_loss(head).detach())
    assert -1.0 <= v <= 0.0


def test_elbo_example():
    head = PrototypeHead(1, 1, 1)
    with torch.no_grad():
        head.means.zero_()
    v = elbo_loss(identity_flow(1), head, torch.zeros(1, 1, dtype=torch.float64), [0])
    assert float(v[0].detach()) == pytest.approx(0.918939, abs=1e-6)


def _batch(d=4, n=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    x1 = torch.randn(n, d, dtype=torch.float64, generator=g)
    x2 = x1 + 0.1 * torch.randn(n, d, dtype=torch.float64, generator=g)
    y = torch.tensor([0, 1] * (n // 2))
    return x1, x2, y


def test_total_zero_weights_is_ce():
    model, head = random_flow(4, 2, 8), random_head(2, 2, 4)
    x1, x2, y = _batch()
    rep = total_loss(model, head, x1, x2, y, LossWeights(0, 0, 0))
    assert rep.total == rep.ce
    assert float(rep.loss.detach()) == rep.ce


def test_total_is_sum_of_terms():
    model, head = random_flow(4, 2, 8), random_head(2, 2, 4)
    x1, x2, y = _batch(n=2)
    x1, x2, y = x1[:1], x2[:1], y[:1]
    rep = total_loss(model, head, x1, x2, y, LossWeights(1, 1, 1))
    assert rep.total == rep.ce + rep.cr + rep.div + rep.elbo
    z, _ = model(x1)
    ce = float(cross_entropy(head.log_posterior(z), y)[0].detach())
    assert rep.ce == pytest.approx(ce, abs=1e-12)
    assert rep.cr == pytest.approx(float(consistency_loss(model, head, x1, x2)[0].detach()), abs=1e-12)
    assert rep.elbo == pytest.approx(float(elbo_loss(model, head, x1, y)[0].detach()), abs=1e-12)
    assert rep.div == pytest.approx(float(diversity_loss(head).detach()), abs=1e-15)


def test_consistency_target_has_no_gradient_path():
    model, head = random_flow(4, 2, 8), random_head(2, 2, 4)
    x1, x2, y = _batch()
    x2 = x2.clone().requires_grad_(True)
    consistency_loss(model, head, x1, x2).sum().backward()
    assert x2.grad is None


def test_total_loss_grad_check_all_terms():
    model, head = random_flow(4, 2, 8, seed=3), random_head(2, 2, 4, seed=3)
    x1, x2, y = _batch(seed=3)
    w = LossWeights(0.7, 0.9, 0.4)
    fn = lambda: total_loss(model, head, x1, x2, y, w).loss
    params = list(model.parameters()) + list(head.parameters())
    assert torch_grad_check(fn, params, eps=1e-6) < 1e-3


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(0, float("inf"), 0)
