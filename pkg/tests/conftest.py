import numpy as np
import pytest
import torch

from protoflow.flow import build_flow
from protoflow.head import PrototypeHead
from protoflow.numerics import RngStream


def randomize_flow(model, scale=0.3, seed=0):
    """Perturb every flow parameter so the map is far from the identity."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def random_flow(dim, n_blocks=2, width=16, seed=0, scale=0.3):
    return randomize_flow(build_flow(dim, n_blocks, width, rng=RngStream(seed)), scale, seed)


def random_head(C, K, d, seed=0, spread=1.0):
    head = PrototypeHead(C, K, d, rng=RngStream(seed), init_scale=spread)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        head.log_var.copy_(0.5 * torch.randn(head.log_var.shape, generator=g, dtype=torch.float64))
        head.logits.copy_(torch.randn(head.logits.shape, generator=g, dtype=torch.float64))
    return head


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def accept():
    """Record one acceptance criterion, print its verdict line and assert it."""
    def record(n, name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2} {name}: {detail}"
        ACCEPTANCE[n] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
