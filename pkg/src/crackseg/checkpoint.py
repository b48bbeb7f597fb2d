"""Versioned checkpoint files.

Layout::

    <MAGIC>\\n
    <header length in bytes, decimal>\\n
    <JSON header: metadata + tensor index, sorted keys>
    <raw little-endian tensor bytes, concatenated in index order>

The header records the SHA-256 of the tensor payload, so truncated or
corrupted files are rejected before any caller state is touched. Files are
deterministic: saving the same state twice gives identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

DETECT_MAGIC = "CRACKDET1"
SEG_MAGIC = "CRACKSEG1"

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    """Unreadable, truncated or corrupted checkpoint."""


class CheckpointMagicError(CheckpointError):
    def __init__(self, path, expected, found):
        super().__init__(f"{path}: expected checkpoint magic {expected!r}, found {found!r}")
        self.expected = expected
        self.found = found


def save(path, magic: str, tensors: dict, meta: dict) -> None:
    """Write ``tensors`` (name -> tensor) and JSON-serializable ``meta``."""
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        data = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = json.dumps(
        {"meta": meta, "tensors": index, "payload_bytes": len(payload),
         "sha256": hashlib.sha256(payload).hexdigest()},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic.encode() + b"\n" + str(len(header)).encode() + b"\n" + header + payload)
    os.replace(tmp, path)


def read_magic(path) -> str:
    with open(path, "rb") as fh:
        return fh.readline(64).rstrip(b"\n").decode(errors="replace")


def load(path, magic: str) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; raises before returning anything partial."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    first, sep, rest = raw.partition(b"\n")
    found = first.decode(errors="replace")
    if not sep or found != magic:
        raise CheckpointMagicError(path, magic, found[:32])
    length, sep, rest = rest.partition(b"\n")
    try:
        n_header = int(length)
        header = json.loads(rest[:n_header])
    except (ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint header") from exc
    payload = rest[n_header:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: truncated checkpoint ({len(payload)} of {header['payload_bytes']} payload bytes)"
        )
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checkpoint payload checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        buf = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[entry["dtype"]])
    return tensors, header["meta"]


def pack_optimizer(optimizer) -> tuple[dict, dict]:
    """Split an optimizer state dict into tensors and JSON metadata."""
    state = optimizer.state_dict()
    tensors = {}
    scalars = {}
    for pid, slots in state["state"].items():
        for key, value in slots.items():
            if torch.is_tensor(value):
                tensors[f"optim.{pid}.{key}"] = value
            else:
                scalars[f"{pid}.{key}"] = value
    return tensors, {"param_groups": state["param_groups"], "scalars": scalars}


def unpack_optimizer(tensors: dict, meta: dict) -> dict:
    state: dict = {}
    for name, value in tensors.items():
        if not name.startswith("optim."):
            continue
        _, pid, key = name.split(".", 2)
        state.setdefault(int(pid), {})[key] = value
    for name, value in meta.get("scalars", {}).items():
        pid, key = name.split(".", 1)
        state.setdefault(int(pid), {})[key] = value
    return {"state": state, "param_groups": meta["param_groups"]}
