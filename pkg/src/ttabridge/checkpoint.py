"""Versioned checkpoint container.

Layout::

    b"TBCK"  u32 version  u64 header_len  header (UTF-8 JSON)  tensor blob

The header holds the run config, step counter, seed policy and a table of
named tensors ``{name: {dtype, shape, offset, nbytes}}``; tensor data is raw
little-endian (parameters and optimizer moments as f32, RNG state as u8).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TBCK"
VERSION = 1
_DTYPES = {"f32": ("<f4", torch.float32), "f64": ("<f8", torch.float64), "u8": ("u1", torch.uint8),
           "i64": ("<i8", torch.int64)}
_BY_TORCH = {v[1]: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_container(path, meta: dict, tensors: dict[str, torch.Tensor]) -> str:
    """Write ``meta`` and ``tensors``; returns the sha256 of the file."""
    table = {}
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        t = tensor.detach().cpu()
        if t.dtype not in _BY_TORCH:
            t = t.float()
        tag = _BY_TORCH[t.dtype]
        raw = np.ascontiguousarray(t.numpy()).astype(_DTYPES[tag][0]).tobytes()
        table[name] = {"dtype": tag, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True).encode()
    payload = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_container(path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, header_len = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 16
    header = json.loads(raw[start : start + header_len])
    blob = memoryview(raw)[start + header_len :]
    tensors = {}
    for name, info in header["tensors"].items():
        np_dtype, torch_dtype = _DTYPES[info["dtype"]]
        chunk = blob[info["offset"] : info["offset"] + info["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np_dtype).reshape(info["shape"])
        tensors[name] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return header["meta"], tensors


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def optimizer_tensors(optimizer: torch.optim.Optimizer, prefix: str = "optim") -> tuple[dict, dict]:
    """Flatten optimizer state into named tensors plus JSON-able hyperparameters."""
    state = optimizer.state_dict()
    tensors = {}
    for idx, slot in state["state"].items():
        for key, value in slot.items():
            tensors[f"{prefix}/{idx}/{key}"] = value if torch.is_tensor(value) else torch.tensor(value)
    return {"param_groups": state["param_groups"]}, tensors


def restore_optimizer(optimizer: torch.optim.Optimizer, groups: dict, tensors: dict, prefix: str = "optim") -> None:
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = value
    optimizer.load_state_dict({"state": state, "param_groups": groups["param_groups"]})


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def restore_module(module: torch.nn.Module, tensors: dict, prefix: str) -> None:
    state = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
    module.load_state_dict(state)
