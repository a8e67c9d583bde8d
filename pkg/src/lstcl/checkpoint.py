"""Checkpoint files: a JSON manifest plus a raw little-endian float32 payload."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MANIFEST = "manifest.json"
PAYLOAD = "params.f32"


def save_checkpoint(directory: str | Path, tensors: Mapping[str, torch.Tensor], meta: dict[str, Any]) -> str:
    """Write ``tensors`` and ``meta`` under ``directory``; returns the payload sha256."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries[name] = {"offset": offset, "shape": list(arr.shape), "dtype": "float32"}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    manifest = dict(meta, tensors=entries, payload=PAYLOAD, sha256=digest, nbytes=offset)
    tmp = directory / (PAYLOAD + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(directory / PAYLOAD)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return digest


def load_checkpoint(directory: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    payload = (directory / manifest["payload"]).read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{directory}: payload checksum mismatch")
    tensors = {}
    for name, e in manifest["tensors"].items():
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest


def checkpoint_hash(directory: str | Path) -> str:
    return json.loads((Path(directory) / MANIFEST).read_text())["sha256"]


def params_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
