"""Checkpoint archives.

On disk: ``DXCKPT1\\n`` + sha256 hex of the payload + ``\\n`` + payload,
where the payload is ``torch.save`` of::

    {"params": {"<stage>/<network>/<layer_index>/<param_name>": tensor, ...},
     "meta":   {"stage", "config_hash", "epoch", "step", ...},
     "optim":  {optimizer name: state_dict}}

Writes go to a temp file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import os
from typing import Dict, Mapping, Optional, Tuple

import torch
import torch.nn as nn

MAGIC = b"DXCKPT1\n"


class CheckpointError(Exception):
    pass


class IntegrityError(CheckpointError):
    pass


class ConfigMismatch(CheckpointError):
    pass


def param_key(stage: str, network: str, state_key: str) -> str:
    layer, _, name = state_key.rpartition(".")
    return f"{stage}/{network}/{layer or '-'}/{name}"


def pack_networks(stage: str, networks: Mapping[str, nn.Module]) -> Dict[str, torch.Tensor]:
    out = {}
    for net_name, module in networks.items():
        for k, v in module.state_dict().items():
            out[param_key(stage, net_name, k)] = v.detach().clone()
    return out


def unpack_network(params: Mapping[str, torch.Tensor], stage: str, network: str, module: nn.Module) -> None:
    prefix = f"{stage}/{network}/"
    state = {}
    for key, v in params.items():
        if key.startswith(prefix):
            layer, name = key[len(prefix):].rsplit("/", 1)
            state[name if layer == "-" else f"{layer}.{name}"] = v
    if not state:
        raise CheckpointError(f"archive has no parameters for {stage}/{network}")
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{stage}/{network}: parameters do not fit the network ({exc})") from exc


def write_archive(path: str | os.PathLike, params: dict, meta: dict, optim: Optional[dict] = None) -> None:
    buf = io.BytesIO()
    torch.save({"params": params, "meta": meta, "optim": optim or {}}, buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).hexdigest().encode()
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + digest + b"\n" + payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_archive(path: str | os.PathLike, expected_hash: Optional[str] = None) -> Tuple[dict, dict, dict]:
    """Return ``(params, meta, optim)``; verify integrity and optionally the config hash."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint archive (bad header)")
    rest = blob[len(MAGIC):]
    digest, sep, payload = rest[:64], rest[64:65], rest[65:]
    if sep != b"\n" or hashlib.sha256(payload).hexdigest().encode() != digest:
        raise IntegrityError(f"{path}: checksum mismatch, archive is corrupted or truncated")
    try:
        data = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise IntegrityError(f"{path}: payload unreadable ({exc})") from exc
    meta = data["meta"]
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise ConfigMismatch(
            f"{path} was produced by config {meta.get('config_hash')}, current config is {expected_hash}; "
            "refusing to mix artifacts from different configurations"
        )
    return data["params"], meta, data["optim"]


def load_networks(path, stage: str, networks: Mapping[str, nn.Module], expected_hash: Optional[str] = None) -> dict:
    params, meta, _ = read_archive(path, expected_hash)
    if meta.get("stage") != stage:
        raise CheckpointError(f"{path} holds stage {meta.get('stage')!r}, expected {stage!r}")
    for name, module in networks.items():
        unpack_network(params, stage, name, module)
    return meta
