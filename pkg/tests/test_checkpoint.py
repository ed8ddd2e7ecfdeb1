import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from protoflow.checkpoint import MAGIC, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from protoflow.training import EmaState

from conftest import random_flow, random_head


def _make(seed, dim=3, C=2, K=3, blocks=2):
    model = random_flow(dim, n_blocks=blocks, width=8, seed=seed)
    head = random_head(C, K, dim, seed=seed)
    if K > 1:
        head.active[0, 1] = False
    params = {**{f"flow.{k}": v for k, v in model.named_parameters()},
              **{f"head.{k}": v for k, v in head.named_parameters()}}
    ema = EmaState(params, 0.99)
    for v in ema.shadow.values():
        v.add_(0.01)
    return Checkpoint(model, head, ema, {"train": {"epochs": 3}},
                      {"seed": seed, "stream": [1, 2]}, {"classes": [0, 1]})


def _bits(module):
    return {k: v.detach().numpy().tobytes() for k, v in module.state_dict().items()}


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), dim=st.integers(1, 5), K=st.integers(1, 3),
       blocks=st.integers(1, 3))
def test_round_trip_bit_exact(tmp_path_factory, seed, dim, K, blocks):
    path = tmp_path_factory.mktemp("ck") / "m.pflw"
    ck = _make(seed, dim, 2, K, blocks)
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert _bits(back.model) == _bits(ck.model)
    assert _bits(back.head) == _bits(ck.head)
    assert back.ema.decay == ck.ema.decay
    assert {k: v.numpy().tobytes() for k, v in back.ema.shadow.items()} == \
        {k: v.numpy().tobytes() for k, v in ck.ema.shadow.items()}
    assert (back.config, back.rng_state, back.meta) == (ck.config, ck.rng_state, ck.meta)
    # the loaded model computes the same map
    x = torch.randn(5, dim, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        assert torch.equal(back.model(x)[0], ck.model(x)[0])
    # saving the loaded checkpoint reproduces the file byte for byte
    path2 = path.with_name("m2.pflw")
    save_checkpoint(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_layout_header(tmp_path):
    path = tmp_path / "m.pflw"
    save_checkpoint(path, _make(0))
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, hlen = struct.unpack("<IQ", raw[4:16])
    assert version == 1
    n_values = sum(v.numel() for v in _make(0).model.state_dict().values()
                   if v.dtype == torch.float64)
    assert (len(raw) - 16 - hlen) % 8 == 0 and (len(raw) - 16 - hlen) // 8 > n_values


def test_no_ema(tmp_path):
    ck = _make(1)
    ck.ema = None
    save_checkpoint(tmp_path / "m.pflw", ck)
    assert load_checkpoint(tmp_path / "m.pflw").ema is None


def test_bad_magic(tmp_path):
    path = tmp_path / "m.pflw"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "m.pflw"
    save_checkpoint(path, _make(0))
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="unsupported checkpoint version 2"):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "m.pflw"
    save_checkpoint(path, _make(0))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
