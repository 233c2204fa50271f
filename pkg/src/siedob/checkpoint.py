"""Checkpoint format: per-network flat binary tensor files plus one JSON
manifest recording names, shapes, and dtypes. Language-portable by design:
every tensor is raw little-endian bytes at a documented offset order.

A checkpoint directory accumulates networks as stages finish; loading
verifies that the stored architecture hash matches the current config.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import StageError

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


def _manifest_path(directory: Path) -> Path:
    return Path(directory) / MANIFEST_NAME


def read_manifest(directory: str | Path) -> dict:
    path = _manifest_path(Path(directory))
    if not path.exists():
        raise StageError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def has_network(directory: str | Path, name: str) -> bool:
    path = _manifest_path(Path(directory))
    if not path.exists():
        return False
    return name in json.loads(path.read_text()).get("networks", {})


def save_networks(
    directory: str | Path,
    nets: dict[str, torch.nn.Module],
    config_hash: str,
    stage: str,
) -> None:
    """Serialize the given networks, merging into any existing manifest.
    Mixing architectures in one directory is refused."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": FORMAT_VERSION, "config_hash": config_hash, "networks": {}, "stages": {}}
    path = _manifest_path(directory)
    if path.exists():
        manifest = json.loads(path.read_text())
        if manifest.get("config_hash") != config_hash:
            raise StageError(
                f"checkpoint dir {directory} holds config hash {manifest.get('config_hash')}, "
                f"refusing to mix with {config_hash}"
            )
    for name, net in nets.items():
        tensors = []
        blob = bytearray()
        for key, tensor in net.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<")) if arr.dtype.byteorder == ">" else arr
            tensors.append({"name": key, "shape": list(arr.shape), "dtype": le.dtype.str})
            blob.extend(le.tobytes())
        fname = f"{name}.bin"
        (directory / fname).write_bytes(bytes(blob))
        manifest["networks"][name] = {"file": fname, "tensors": tensors}
        manifest["stages"][name] = stage
    path.write_text(json.dumps(manifest, indent=2))


def load_networks(
    directory: str | Path,
    nets: dict[str, torch.nn.Module],
    config_hash: str,
    *,
    required: bool = True,
) -> list[str]:
    """Load stored weights into the given modules. Returns the names actually
    loaded; missing networks raise when `required`."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.get("config_hash") != config_hash:
        raise StageError(
            f"checkpoint {directory} was written for config hash "
            f"{manifest.get('config_hash')}, current is {config_hash}"
        )
    loaded = []
    for name, net in nets.items():
        entry = manifest["networks"].get(name)
        if entry is None:
            if required:
                raise StageError(f"checkpoint {directory} has no network {name!r}")
            continue
        blob = (directory / entry["file"]).read_bytes()
        state = {}
        offset = 0
        for spec in entry["tensors"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            nbytes = count * dtype.itemsize
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(spec["shape"])
            state[spec["name"]] = torch.from_numpy(arr.copy())
            offset += nbytes
        net.load_state_dict(state)
        loaded.append(name)
    return loaded


def network_checksum(net: torch.nn.Module) -> str:
    """Digest of all parameters and buffers, for stage-isolation checks."""
    h = hashlib.sha256()
    for key, tensor in sorted(net.state_dict().items()):
        h.update(key.encode())
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
