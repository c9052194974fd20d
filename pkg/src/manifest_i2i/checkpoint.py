"""Single-file checkpoints: an ``.npz`` archive of named arrays plus a JSON
metadata record."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .networks import NetworkBundle, NetworkConfig

FORMAT_VERSION = 1
META_KEY = "__meta__"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, bundle: NetworkBundle, extra_arrays: dict | None = None,
                    extra_meta: dict | None = None) -> Path:
    """Write parameters/buffers as ``param/<name>``; extra arrays keep their keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in bundle.state_dict().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
    meta = {
        "format_version": FORMAT_VERSION,
        "network": dataclasses.asdict(bundle.cfg),
        "phi_seed": bundle.cfg.phi_seed,
        **(extra_meta or {}),
    }
    arrays[META_KEY] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files}
    if META_KEY not in arrays:
        raise CheckpointError(f"{path}: missing metadata record")
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    return meta, arrays


def load_checkpoint(path) -> tuple[NetworkBundle, dict, dict[str, np.ndarray]]:
    """Rebuild the bundle described by the metadata and load its state.

    Returns ``(bundle, meta, extra_arrays)`` where extras are the non-parameter arrays.
    """
    meta, arrays = read_checkpoint(path)
    cfg = NetworkConfig(**meta["network"])
    bundle = NetworkBundle(cfg)
    state = {k.removeprefix("param/"): torch.from_numpy(v.copy())
             for k, v in arrays.items() if k.startswith("param/")}
    try:
        bundle.load_state_dict(state, strict=True)
    except RuntimeError as err:
        raise CheckpointError(f"{path}: checkpoint does not match architecture: {err}") from err
    extras = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return bundle, meta, extras
