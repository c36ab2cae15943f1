"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    offset 0   magic  b"SSLB"
    offset 4   uint32 format version (currently 1)
    offset 8   uint64 header length N
    offset 16  N bytes UTF-8 JSON header
    ...        raw float64 ('<f8') tensor data, concatenated

The JSON header holds ``model_config``, ``meta`` (training state and
vocabularies) and ``tensors``: a list of ``{"name", "shape", "offset"}``
records, where ``offset`` counts float64 elements from the start of the
data block. Tensor names are grouped by prefix: ``param/``, ``opt/``,
``anchor.theta/`` and ``anchor.fisher/``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .models import ModelConfig

MAGIC = b"SSLB"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    meta: Dict = field(default_factory=dict)
    opt_state: Dict[str, np.ndarray] = field(default_factory=dict)
    anchor_theta: Optional[Dict[str, np.ndarray]] = None
    anchor_fisher: Optional[Dict[str, np.ndarray]] = None

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"opt/{k}": v for k, v in self.opt_state.items()})
        if self.anchor_theta is not None:
            out.update({f"anchor.theta/{k}": v for k, v in self.anchor_theta.items()})
            out.update({f"anchor.fisher/{k}": v for k, v in self.anchor_fisher.items()})
        return out

    def copy(self) -> "Checkpoint":
        dup = lambda d: None if d is None else {k: v.copy() for k, v in d.items()}
        return Checkpoint(ModelConfig.from_dict(self.model_config.to_dict()), dup(self.params),
                          json.loads(json.dumps(self.meta)), dup(self.opt_state),
                          dup(self.anchor_theta), dup(self.anchor_fisher))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = ckpt.tensors()
    records, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        records.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({
        "model_config": ckpt.model_config.to_dict(),
        "meta": ckpt.meta,
        "tensors": records,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    data = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "opt": {}, "anchor.theta": {}, "anchor.fisher": {}}
    for rec in header["tensors"]:
        prefix, name = rec["name"].split("/", 1)
        size = int(np.prod(rec["shape"], dtype=np.int64))
        arr = data[rec["offset"]:rec["offset"] + size].reshape(rec["shape"])
        groups[prefix][name] = np.array(arr, dtype=np.float64)
    has_anchor = bool(groups["anchor.theta"])
    return Checkpoint(
        ModelConfig.from_dict(header["model_config"]),
        groups["param"],
        header["meta"],
        groups["opt"],
        groups["anchor.theta"] if has_anchor else None,
        groups["anchor.fisher"] if has_anchor else None,
    )
