"""Self-describing checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header, then the raw tensor bytes in header order. The header is
serialised with sorted keys so identical states give identical files.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RCCMCKPT"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.uint8: "uint8",
    torch.int32: "int32",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    model_state: dict[str, torch.Tensor]
    optimizer_state: dict | None = None
    rng: dict = field(default_factory=dict)
    torch_rng: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)


def _optimizer_to_named(state: dict) -> tuple[dict, dict[str, torch.Tensor]]:
    tensors = {}
    meta_state = {}
    for idx, slots in state["state"].items():
        meta_state[str(idx)] = {}
        for key, value in slots.items():
            if torch.is_tensor(value):
                tensors[f"optim/{idx}/{key}"] = value
                meta_state[str(idx)][key] = None
            else:
                meta_state[str(idx)][key] = value
    return {"state": meta_state, "param_groups": state["param_groups"]}, tensors


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Atomically write ``ckpt`` to ``path`` (temp file then rename)."""
    path = Path(path)
    tensors: dict[str, torch.Tensor] = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    optim_meta = None
    if ckpt.optimizer_state is not None:
        optim_meta, optim_tensors = _optimizer_to_named(ckpt.optimizer_state)
        tensors.update(optim_tensors)
    if ckpt.torch_rng is not None:
        tensors["rng/torch"] = ckpt.torch_rng

    index = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "rng": ckpt.rng,
        "optimizer": optim_meta,
        "extra": ckpt.extra,
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)[0]


def _read_header(fh, path):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    fixed = fh.read(12)
    if len(fixed) != 12:
        raise CheckpointError(f"{path}: truncated header")
    version, head_len = struct.unpack("<IQ", fixed)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    header = json.loads(fh.read(head_len).decode("utf-8"))
    if header.get("format_version") != version:
        raise CheckpointVersionError(f"{path}: header version {header.get('format_version')} disagrees with {version}")
    return header, fh.tell()


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        header, start = _read_header(fh, path)
        payload = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        lo = entry["offset"]
        raw = payload[lo : lo + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: tensor {entry['name']} is truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<")).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))

    model_state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    optim_state = None
    if header["optimizer"] is not None:
        meta = header["optimizer"]
        state = {}
        # sorted JSON keys put "10" before "2"; restore numeric order
        for idx, slots in sorted(meta["state"].items(), key=lambda kv: int(kv[0])):
            state[int(idx)] = {key: (tensors[f"optim/{idx}/{key}"] if value is None else value) for key, value in slots.items()}
        optim_state = {"state": state, "param_groups": meta["param_groups"]}
    return Checkpoint(
        config=header["config"],
        epoch=header["epoch"],
        model_state=model_state,
        optimizer_state=optim_state,
        rng=header["rng"],
        torch_rng=tensors.get("rng/torch"),
        extra=header["extra"],
    )
