import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from protoflow.head import (LOG_VAR_MIN, PrototypeComponent, PrototypeHead, class_posterior,
                            kmeans_init, log_class_conditional, log_component_density,
                            most_likely_prototype, otsu_threshold, prune, sample_truncated)
from protoflow.numerics import RngStream, torch_grad_check

from conftest import random_head


def comp(mean, var, logit=0.0):
    return PrototypeComponent(np.asarray(mean, float), np.log(np.asarray(var, float)), logit)


def test_log_component_density_examples():
    assert log_component_density(comp([0.0], [1.0]), [0.0]) == pytest.approx(-0.918939, abs=1e-6)
    assert log_component_density(comp([0.0, 0.0], [1.0, 1.0]), [0.0, 0.0]) == pytest.approx(-1.837877, abs=1e-6)
    # -1/2 [(4/4) + (0/1)] - 1/2 [ln 4 + ln 1] - ln 2 pi
    hand = -0.5 * (4 / 4 + 0 / 1) - 0.5 * (math.log(4) + math.log(1)) - math.log(2 * math.pi)
    assert hand == pytest.approx(-3.031024, abs=1e-6)
    assert log_component_density(comp([1, 2], [4, 1]), [3, 2]) == pytest.approx(hand, abs=1e-12)


def test_head_density_matches_scipy(rng):
    head = random_head(3, 2, 4, seed=5)
    z = rng.normal(size=(10, 4))
    got = head.component_log_density(z).detach().numpy()
    for c in range(3):
        for k in range(2):
            cov = np.diag(np.exp(head.log_var[c, k].detach().numpy()))
            ref = stats.multivariate_normal(head.means[c, k].detach().numpy(), cov).logpdf(z)
            np.testing.assert_allclose(got[:, c, k], ref, rtol=1e-10, atol=1e-10)


def test_class_conditional_examples():
    head = PrototypeHead(1, 1, 1)
    with torch.no_grad():
        head.means.zero_()
    assert log_class_conditional(head, [[0.3]], 0) == pytest.approx(
        log_component_density(head.component(0, 0), [0.3]), abs=1e-12)
    head2 = PrototypeHead(1, 2, 1)
    with torch.no_grad():
        head2.means.copy_(torch.tensor([[[1.0], [-1.0]]]))
    assert log_class_conditional(head2, [[0.0]], 0) == pytest.approx(-1.418939, abs=1e-6)
    head3 = PrototypeHead(1, 2, 1)
    with torch.no_grad():
        head3.means.fill_(0.5)
    assert log_class_conditional(head3, [[0.2]], 0) == pytest.approx(
        log_component_density(comp([0.5], [1.0]), [0.2]), abs=1e-12)


def test_class_conditional_pruned_error():
    head = PrototypeHead(2, 1, 1)
    head.active[1, 0] = False
    with pytest.raises(ValueError, match="pruned"):
        log_class_conditional(head, [[0.0]], 1)


def test_posterior_examples():
    head = PrototypeHead(2, 1, 1)
    with torch.no_grad():
        head.means.copy_(torch.tensor([[[-2.0]], [[2.0]]]))
    np.testing.assert_allclose(class_posterior(head, [0.0]), [0.5, 0.5], atol=1e-15)
    with torch.no_grad():
        head.means.copy_(torch.tensor([[[0.0]], [[10.0]]]))
    p = class_posterior(head, [0.0])
    assert p[0] == pytest.approx(1 / (1 + math.exp(-50)), abs=1e-15)


def test_posterior_normalized_after_prune_and_far_away(rng):
    head = random_head(3, 3, 2, seed=2)
    head.active[0, 1] = False
    head.active[2, 0] = False
    z = rng.normal(size=(100, 2)) * 1e3
    lp = head.log_posterior(z).detach().numpy()
    assert np.all(np.isfinite(head.class_log_likelihood(z).detach().numpy()))
    np.testing.assert_allclose(np.exp(lp).sum(1), 1.0, atol=1e-10)


def test_class_prior():
    head = PrototypeHead(2, 1, 1, class_prior=[3, 1])
    with torch.no_grad():
        head.means.zero_()
    np.testing.assert_allclose(class_posterior(head, [0.0]), [0.75, 0.25], atol=1e-15)


def test_most_likely_prototype_examples(rng):
    head = PrototypeHead(1, 1, 2)
    assert most_likely_prototype(head, [[5.0, 5.0]]).tolist() == [[0, 0]]
    head = PrototypeHead(2, 3, 2)
    with torch.no_grad():
        head.means.copy_(torch.arange(12, dtype=torch.float64).reshape(2, 3, 2) * 3.0)
    assert most_likely_prototype(head, head.means[1, 2].detach()[None]).tolist() == [[1, 2]]
    head = random_head(2, 2, 3, seed=9)
    z = rng.normal(size=(30, 3))
    got = most_likely_prototype(head, z)
    for b in range(30):
        best = max(((c, k) for c in range(2) for k in range(2)),
                   key=lambda ck: log_component_density(head.component(*ck), z[b]))
        assert tuple(got[b]) == best


def test_most_likely_prototype_ignores_logit_shift(rng):
    head = random_head(2, 3, 2, seed=3)
    z = rng.normal(size=(50, 2))
    before = most_likely_prototype(head, z)
    with torch.no_grad():
        head.logits[0] += 5.0
    np.testing.assert_array_equal(before, most_likely_prototype(head, z))


def test_log_class_conditional_grad_check():
    head = random_head(2, 3, 2, seed=4)
    z = torch.randn(6, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    err = torch_grad_check(lambda: head.class_log_likelihood(z).sum(), head.parameters(), eps=1e-6)
    assert err < 1e-3


def test_kmeans_init(rng):
    head = PrototypeHead(1, 1, 2)
    pts = rng.normal(size=(30, 2))
    kmeans_init(head, [pts])
    np.testing.assert_allclose(head.means[0, 0].detach().numpy(), pts.mean(0), atol=1e-12)

    a = rng.normal(size=(20, 2)) * 0.1 + [10, 0]
    b = rng.normal(size=(20, 2)) * 0.1 - [10, 0]
    head = PrototypeHead(1, 2, 2)
    kmeans_init(head, [np.vstack([a, b])], rng=RngStream(0))
    got = sorted(head.means[0].detach().numpy().tolist())
    np.testing.assert_allclose(got, sorted([b.mean(0).tolist(), a.mean(0).tolist()]), atol=1e-9)

    head = PrototypeHead(1, 3, 2)
    kmeans_init(head, [rng.normal(size=(3, 2))], rng=RngStream(0))
    assert torch.all(head.clamped_log_var() == LOG_VAR_MIN)

    with pytest.raises(ValueError):
        kmeans_init(PrototypeHead(1, 4, 2), [rng.normal(size=(3, 2))])


def brute_otsu(v, bins):
    """Exhaustive between-class variance over interior edges, plain loops."""
    v = sorted(float(x) for x in v)
    edges = np.linspace(v[0], v[-1], bins + 1)
    best, best_t = -1.0, None
    for i in range(1, bins):
        t = float(edges[i])
        a = [x for x in v if x < t]
        b = [x for x in v if x >= t]
        if not a or not b:
            continue
        w0, w1 = len(a) / len(v), len(b) / len(v)
        score = w0 * w1 * (sum(a) / len(a) - sum(b) / len(b)) ** 2
        if score > best + 1e-15:
            best, best_t = score, t
    return best_t


def test_otsu_examples():
    assert otsu_threshold([0.0] * 10 + [1.0] * 10, bins=2) == pytest.approx(0.5)
    t = otsu_threshold([0.01, 0.02, 0.03, 0.8, 0.9])
    assert 0.03 < t < 0.8
    with pytest.raises(ValueError, match="degenerate histogram"):
        otsu_threshold([0.3] * 5)


def test_otsu_vs_brute_force(rng):
    for _ in range(20):
        v = np.round(rng.uniform(size=rng.integers(5, 40)), 3)
        t = otsu_threshold(v, bins=32)
        ref = brute_otsu(v, 32)
        assert t == pytest.approx(ref, abs=1e-12)


def test_prune_bimodal():
    head = PrototypeHead(3, 4, 2)
    with torch.no_grad():
        head.logits.fill_(-10.0)
        head.logits[:, 1] = 10.0
    records = prune(head)
    assert head.active.sum() == 3
    assert head.active[:, 1].all()
    assert len(records) == 12 and sum(r.kept for r in records) == 3
    np.testing.assert_allclose(head.posterior(torch.zeros(4, 2)).sum(1).detach().numpy(), 1.0,
                               atol=1e-10)


def test_prune_uniform_is_noop():
    head = PrototypeHead(2, 3, 2)
    with pytest.warns(UserWarning, match="degenerate"):
        prune(head)
    assert head.active.all()


def test_sample_truncated():
    c = comp([1.0, -2.0], [4.0, 0.25])
    s = sample_truncated(c, float("inf"), 20000, RngStream(0))
    assert np.all(np.abs(s.mean(0) - c.mean) < 5 * c.std / math.sqrt(20000))
    c1 = comp([0.0], [2.0])
    s = sample_truncated(c1, 1.0, 100000, RngStream(1))
    ref = stats.truncnorm(-1, 1).var() * 2.0
    assert ref == pytest.approx(0.2911 * 2.0, rel=1e-3)
    assert s.var() == pytest.approx(ref, rel=0.05)
    assert np.all(np.abs(s) <= math.sqrt(2.0))
    with pytest.raises(ValueError):
        sample_truncated(c1, 0.0, 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(0, 10_000))
def test_posterior_property(C, K, d, seed):
    head = random_head(C, K, d, seed)
    z = np.random.default_rng(seed).normal(size=(20, d)) * 3
    p = head.posterior(z).detach().numpy()
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-10)
