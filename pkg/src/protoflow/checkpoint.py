"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"PFLW" | u32 version | u64 header length | header (UTF-8 JSON) | payload

The header holds the config echo, flow layer specs, head shape, EMA names,
RNG state, free-form metadata and a tensor table of ``name, shape, offset``.
The payload is the concatenation of every tensor as little-endian float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from .flow import FlowModel, flow_from_specs
from .head import PrototypeHead
from .numerics import DTYPE
from .training import EmaState

MAGIC = b"PFLW"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: FlowModel
    head: PrototypeHead
    ema: Optional[EmaState] = None
    config: Dict = field(default_factory=dict)
    rng_state: Optional[Dict] = None
    meta: Dict = field(default_factory=dict)


def _tensors(ckpt: Checkpoint) -> Dict[str, torch.Tensor]:
    out = {}
    for name, t in ckpt.model.state_dict().items():
        if t.dtype == DTYPE:
            out[f"flow/{name}"] = t
    for name, t in ckpt.head.state_dict().items():
        out[f"head/{name}"] = t
    if ckpt.ema is not None:
        for name, t in ckpt.ema.shadow.items():
            out[f"ema/{name}"] = t
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = _tensors(ckpt)
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().numpy().astype("<f8"))
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": ckpt.config,
        "flow": {"dim": ckpt.model.dim, "layers": ckpt.model.layer_specs()},
        "head": {"n_classes": ckpt.head.n_classes, "n_prototypes": ckpt.head.n_prototypes,
                 "dim": ckpt.head.dim},
        "ema": None if ckpt.ema is None else {"decay": ckpt.ema.decay},
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": table,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    header = json.loads(data[16:16 + hlen].decode())
    payload = memoryview(data)[16 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start + 8 * n > len(payload):
            raise CheckpointError(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float64))

    fl = header["flow"]
    model = flow_from_specs(fl["dim"], fl["layers"])
    state = model.state_dict()
    for name in state:
        key = f"flow/{name}"
        if key in tensors:
            state[name] = tensors[key]
    model.load_state_dict(state)

    hd = header["head"]
    head = PrototypeHead(hd["n_classes"], hd["n_prototypes"], hd["dim"])
    hstate = {}
    for name, t in head.state_dict().items():
        src = tensors[f"head/{name}"]
        hstate[name] = src.to(torch.bool) if t.dtype == torch.bool else src
    head.load_state_dict(hstate)

    ema = None
    if header["ema"] is not None:
        ema = EmaState({}, header["ema"]["decay"])
        ema.shadow = {k[4:]: v for k, v in tensors.items() if k.startswith("ema/")}
    return Checkpoint(model, head, ema, header["config"], header["rng_state"], header["meta"])
