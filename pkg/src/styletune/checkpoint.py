"""Checkpoint files: one JSON manifest line plus raw little-endian blobs.

Tensors are written sorted by name with explicit shape/dtype/offset entries,
so files are byte-deterministic for identical contents and can be audited
without loading.  The manifest's ``meta`` dict carries whatever config the
caller wants alongside (model or adapter hyperparameters).
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapters import AdapterConfig, AdapterParams
from .model import ModelConfig

CHECKPOINT_VERSION = 1


def serialize_tensors(arrays: dict, meta: dict | None = None) -> bytes:
    entries = []
    payload = io.BytesIO()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "<f8",
                "offset": payload.tell(),
            }
        )
        payload.write(arr.tobytes())
    manifest = json.dumps(
        {"version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    )
    return manifest.encode() + b"\n" + payload.getvalue()


def save_tensors(path: Path, arrays: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(serialize_tensors(arrays, meta))


def load_tensors(path: Path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    manifest = json.loads(raw[:nl].decode())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    payload = raw[nl + 1 :]
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(payload, dtype=e["dtype"], count=n, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return arrays, manifest["meta"]


def hash_arrays(arrays: dict, meta: dict | None = None) -> str:
    return hashlib.sha256(serialize_tensors(arrays, meta)).hexdigest()


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# Model / adapter wrappers ---------------------------------------------


def save_model(path: Path, weights: dict, cfg: ModelConfig) -> None:
    save_tensors(path, {k: t.data for k, t in weights.items()}, {"model": asdict(cfg)})


def load_model(path: Path) -> tuple[dict, ModelConfig]:
    arrays, meta = load_tensors(path)
    cfg = ModelConfig(**meta["model"])
    return {k: ad.param(v) for k, v in arrays.items()}, cfg


def save_adapter(path: Path, adapter: AdapterParams) -> None:
    save_tensors(path, adapter.named_arrays(), {"adapter": asdict(adapter.cfg)})


def load_adapter(path: Path) -> AdapterParams:
    arrays, meta = load_tensors(path)
    cfg = AdapterConfig(**meta["adapter"])
    return AdapterParams(cfg=cfg, tensors={k: ad.param(v) for k, v in arrays.items()})


def hash_model(weights: dict) -> str:
    return hash_arrays({k: t.data for k, t in weights.items()})
