"""Self-describing checkpoint container.

Layout: the 8-byte magic ``AMSCKPT1``, a little-endian uint64 header length,
a UTF-8 JSON header (format version, metadata, name -> shape/dtype/offset
table) and finally the raw little-endian tensor payloads back to back.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError

MAGIC = b"AMSCKPT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    params: "OrderedDict[str, np.ndarray]"
    epoch: int
    num_classes: int
    optimizer_step: int = 0
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def save_checkpoint(ckpt: Checkpoint, path: str):
    tensors = list(ckpt.params.items()) + list(ckpt.optimizer.items())
    table = []
    payload = []
    offset = 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                      "offset": offset, "nbytes": len(raw),
                      "group": "optimizer" if name in ckpt.optimizer else "params"})
        payload.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION,
              "meta": {"config": ckpt.config, "epoch": ckpt.epoch, "num_classes": ckpt.num_classes,
                       "optimizer_step": ckpt.optimizer_step},
              "tensors": table}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise InputError(f"{path} is not an amsnet checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint version {header.get('format_version')}")
    base = 16 + hlen
    params, opt = OrderedDict(), OrderedDict()
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=e["dtype"]).reshape(e["shape"])
        arr = arr.astype(np.dtype(e["dtype"]).newbyteorder("="))
        (opt if e["group"] == "optimizer" else params)[e["name"]] = arr
    meta = header["meta"]
    return Checkpoint(meta["config"], params, meta["epoch"], meta["num_classes"],
                      meta["optimizer_step"], opt)
