"""Single-file checkpoints.

Layout::

    b"STMOECK1"                 8-byte magic
    uint64 little-endian        header length H
    H bytes of UTF-8 JSON       {"config": ..., "tensors": [{name, shape, group}], "meta": ...}
    raw float64 little-endian   every tensor in header order, C order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stmoe.config import from_dict, to_dict
from stmoe.model import ModelConfig, Params
from stmoe.optim import AdamState

MAGIC = b"STMOECK1"


@dataclass
class Checkpoint:
    params: Params
    opt_state: AdamState | None = None
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = []
    blobs = []
    for name, t in ckpt.params.tensors.items():
        entries.append({"name": name, "shape": list(t.shape), "group": ckpt.params.groups[name]})
        blobs.append(t.data)
    opt = None
    if ckpt.opt_state is not None:
        opt = {"step": ckpt.opt_state.step, "names": sorted(ckpt.opt_state.m)}
        for name in opt["names"]:
            for slot in ("m", "v"):
                arr = getattr(ckpt.opt_state, slot)[name]
                entries.append({"name": f"opt.{slot}.{name}", "shape": list(arr.shape),
                                "group": "optimizer"})
                blobs.append(arr)
    header = {"config": to_dict(ckpt.params.config), "tensors": entries,
              "optimizer": opt, "meta": ckpt.meta}
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    config = from_dict(ModelConfig, header["config"], "model")
    params = Params(config)
    offset = 16 + n
    opt_arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        offset += 8 * count
        if entry["group"] == "optimizer":
            opt_arrays[entry["name"]] = arr.astype(np.float64)
        else:
            params.add(entry["name"], arr, entry["group"])
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    opt_state = None
    if header.get("optimizer"):
        info = header["optimizer"]
        opt_state = AdamState(info["step"],
                              {k: opt_arrays[f"opt.m.{k}"] for k in info["names"]},
                              {k: opt_arrays[f"opt.v.{k}"] for k in info["names"]})
    return Checkpoint(params, opt_state, header.get("meta", {}))
