import math

import numpy as np
import pytest
import torch

from protoflow.data import AugmentationSpec, Dataset, make_two_moons
from protoflow.flow import build_flow
from protoflow.head import PrototypeHead
from protoflow.losses import LossWeights
from protoflow.numerics import RngStream
from protoflow.training import (EmaState, TrainConfig, clip_grad_norm, ema_update, lambda_cr_at,
                                lr_at, pretrain_unconditional, standard_normal_nll, train)


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3)
    assert lr_at(cfg, 10, 110, warmup_steps=10) == 1e-3
    assert lr_at(cfg, 110, 110, warmup_steps=10) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(cfg, 60, 110, warmup_steps=10) == pytest.approx(5e-4, rel=1e-12)
    assert lr_at(cfg, 0, 110, warmup_steps=10) == 0.0
    assert lr_at(cfg, 5, 110, warmup_steps=10) == pytest.approx(5e-4)
    # continuous at the warmup boundary
    assert lr_at(cfg, 10 - 1e-9, 110, 10) == pytest.approx(lr_at(cfg, 10, 110, 10), rel=1e-9)


def test_lambda_cr_rampup():
    cfg = TrainConfig(weights=LossWeights(cr=2.0))
    assert cfg.cr_rampup_epochs == 50
    assert lambda_cr_at(cfg, 0) == 0.0
    assert lambda_cr_at(cfg, 25) == 1.0
    assert lambda_cr_at(cfg, 50) == 2.0
    assert lambda_cr_at(cfg, 80) == 2.0


def _param(g):
    p = torch.zeros(len(g), dtype=torch.float64, requires_grad=True)
    p.grad = torch.tensor(g, dtype=torch.float64)
    return p


def test_clip_grad_norm():
    p = _param([0.0, 0.0])
    assert clip_grad_norm([p], 1.0) == 0.0 and p.grad.tolist() == [0.0, 0.0]
    p = _param([30.0, 40.0])
    clip_grad_norm([p], 100.0)
    assert p.grad.tolist() == [30.0, 40.0]
    p = _param([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == 5.0
    np.testing.assert_allclose(p.grad.numpy(), [0.6, 0.8], atol=1e-15)
    assert float(p.grad.norm()) == pytest.approx(1.0, abs=1e-15)
    q = _param([float("nan")])
    with pytest.raises(FloatingPointError, match="bad"):
        clip_grad_norm([("bad", q)], 1.0)


def test_clip_never_exceeds(rng):
    for _ in range(50):
        ps = [_param(rng.normal(0, 100, rng.integers(1, 5)).tolist()) for _ in range(3)]
        m = float(rng.uniform(0.1, 10))
        clip_grad_norm(ps, m)
        assert math.sqrt(sum(float((p.grad ** 2).sum()) for p in ps)) <= m * (1 + 1e-12)


def test_ema_examples():
    param = {"w": torch.tensor([0.0], dtype=torch.float64)}
    for decay, expected in [(0.0, 0.0), (1.0, 1.0), (0.9, 0.9)]:
        ema = EmaState({"w": torch.tensor([1.0], dtype=torch.float64)}, decay)
        ema_update(ema, param)
        assert float(ema.shadow["w"]) == pytest.approx(expected, abs=1e-15)
    ema = EmaState({"w": torch.ones(2)}, 0.5)
    with pytest.raises(ValueError):
        ema_update(ema, {"w": torch.ones(3)})


def test_ema_geometric_decay():
    ema = EmaState({"w": torch.tensor([1.0], dtype=torch.float64)}, 0.8)
    p = {"w": torch.tensor([0.0], dtype=torch.float64)}
    for t in range(1, 20):
        ema_update(ema, p)
        assert float(ema.shadow["w"]) == pytest.approx(0.8 ** t, rel=1e-12)


def test_pretrain_zero_epochs_noop():
    model = build_flow(2, 2, 8, rng=RngStream(0))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    data = make_two_moons(100, 0.1, RngStream(0))
    assert pretrain_unconditional(model, data, TrainConfig(pretrain_epochs=0)) == []
    for k, v in model.state_dict().items():
        assert torch.equal(before[k], v)


def test_pretrain_moves_toward_data():
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(3.0, 1.0, (400, 1)), np.zeros(400), 1)
    model = build_flow(1, 1, rng=RngStream(0))
    x = torch.from_numpy(data.samples)
    nll0 = float(standard_normal_nll(model, x).mean().detach())
    hist = pretrain_unconditional(model, data, TrainConfig(lr=0.05, batch_size=10, pretrain_epochs=5,
                                                           warmup_epochs=0), RngStream(1))
    nll1 = float(standard_normal_nll(model, x).mean().detach())
    assert nll1 <= nll0 and hist[-1] < hist[0]
    mode = float(model.inverse(torch.zeros(1, 1, dtype=torch.float64))[0, 0].detach())
    assert abs(mode - 3.0) < abs(0.0 - 3.0) and abs(mode - 3.0) < 0.5


def _tiny_problem():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-2, 0.5, 100), rng.normal(2, 0.5, 100)])[:, None]
    return Dataset(x, np.repeat([0, 1], 100), 2)


def test_ce_only_training_decreases_loss():
    ds = _tiny_problem()
    cfg = TrainConfig(lr=0.05, batch_size=20, epochs=1, warmup_epochs=0, kmeans=False,
                      weights=LossWeights(0, 0, 0), n_prototypes=1, seed=0)
    model = build_flow(1, 1, rng=RngStream(0))
    head = PrototypeHead(2, 1, 1, rng=RngStream(0))
    res = train(model, head, ds, cfg)
    ce = [row["ce"] for row in res.log]
    assert len(ce) == 10
    assert ce[-1] < ce[0]


def _moons_run(seed=0, epochs=2):
    ds = make_two_moons(200, 0.1, RngStream(0))
    cfg = TrainConfig(lr=3e-3, batch_size=50, epochs=epochs, warmup_epochs=1, n_prototypes=2,
                      seed=seed, ema_decay=0.9, weights=LossWeights(0.5, 1.0, 1.0),
                      augmentation=AugmentationSpec(0, 0, 0, 0, 0.02))
    model = build_flow(2, 2, 16, rng=RngStream(seed))
    head = PrototypeHead(2, 2, 2, rng=RngStream(seed))
    return train(model, head, ds, cfg, val=ds)


def test_training_deterministic():
    a, b = _moons_run(), _moons_run()
    for (k, v), (k2, v2) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    for k, v in a.head.state_dict().items():
        assert torch.equal(v, b.head.state_dict()[k])
    assert a.log == b.log


def test_training_log_columns_and_clipping():
    res = _moons_run()
    keys = {"epoch", "step", "ce", "cr", "div", "elbo", "total", "lr", "grad_norm"}
    assert all(keys <= set(row) for row in res.log)
    assert "val_acc" in res.log[-1] and "val_bpd" in res.log[-1]
    assert len(res.epochs) == 2 and res.best_state is not None
    assert all(row["grad_norm"] >= 0 for row in res.log)
    assert all(0 <= e["val_acc"] <= 1 and math.isfinite(e["val_bpd"]) for e in res.epochs)


def test_ema_shadow_differs_from_raw():
    res = _moons_run(epochs=2)
    raw = dict(res.model.named_parameters())
    diff = max(float((res.ema.shadow[f"flow.{k}"] - v.detach()).abs().max()) for k, v in raw.items())
    assert diff > 0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(cr_target="nope")
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)
    assert TrainConfig().to_dict()["weights"] == {"cr": 1.0, "div": 1.0, "elbo": 1.0}
