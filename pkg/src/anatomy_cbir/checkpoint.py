"""Checkpoint persistence: one zip archive per snapshot.

Layout: ``manifest.json`` (format version, epoch, architecture hash, training
config, loss history, optimizer scalars) plus ``model.npz`` / ``optimizer.npz``
holding every tensor under its hierarchical state-dict name.  Arrays round-trip
bit-exactly, so a reloaded model reproduces the original forward pass.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from anatomy_cbir.networks import AnatomyCodec

CHECKPOINT_FORMAT = 1
CHECKPOINT_KIND = "anatomy-cbir-checkpoint"


@dataclass
class Checkpoint:
    epoch: int
    architecture_hash: str
    config: dict
    loss_history: list
    model_arrays: dict
    optimizer_groups: list | None = None
    optimizer_scalars: dict = field(default_factory=dict)
    optimizer_arrays: dict = field(default_factory=dict)


def _npz_bytes(arrays: dict) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _pack_optimizer(optimizer):
    if optimizer is None:
        return None, {}, {}
    sd = optimizer.state_dict()
    groups = json.loads(json.dumps(sd["param_groups"], default=_json_default))
    arrays, scalars = {}, {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            name = f"{idx}.{key}"
            if isinstance(value, torch.Tensor) and value.dim() > 0:
                arrays[name] = value.detach().cpu().numpy()
            elif isinstance(value, torch.Tensor):
                scalars[name] = float(value)
            else:
                scalars[name] = value
    return groups, scalars, arrays


def _json_default(value):
    if isinstance(value, torch.Tensor):
        return value.item()
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    raise TypeError(f"not JSON-serializable: {type(value)}")


def save_checkpoint(path, model: AnatomyCodec, optimizer=None, *, epoch: int,
                    config: dict, loss_history=()) -> Path:
    """Write the snapshot atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model_arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    groups, opt_scalars, opt_arrays = _pack_optimizer(optimizer)
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "kind": CHECKPOINT_KIND,
        "epoch": int(epoch),
        "architecture_hash": model.architecture_hash(),
        "config": config,
        "loss_history": list(loss_history),
        "optimizer_groups": groups,
        "optimizer_scalars": opt_scalars,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        zf.writestr("model.npz", _npz_bytes(model_arrays))
        if opt_arrays or groups:
            zf.writestr("optimizer.npz", _npz_bytes(opt_arrays))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("kind") != CHECKPOINT_KIND:
            raise ValueError(f"{path} is not a checkpoint archive")
        with np.load(io.BytesIO(zf.read("model.npz"))) as data:
            model_arrays = {k: data[k] for k in data.files}
        optimizer_arrays = {}
        if "optimizer.npz" in zf.namelist():
            with np.load(io.BytesIO(zf.read("optimizer.npz"))) as data:
                optimizer_arrays = {k: data[k] for k in data.files}
    return Checkpoint(
        epoch=manifest["epoch"],
        architecture_hash=manifest["architecture_hash"],
        config=manifest["config"],
        loss_history=manifest.get("loss_history", []),
        model_arrays=model_arrays,
        optimizer_groups=manifest.get("optimizer_groups"),
        optimizer_scalars=manifest.get("optimizer_scalars", {}),
        optimizer_arrays=optimizer_arrays,
    )


def build_model_from_config(config: dict) -> AnatomyCodec:
    keys = ("image_size", "num_codes", "code_dim", "spade_hidden")
    kwargs = {k: int(config[k]) for k in keys if k in config}
    return AnatomyCodec(**kwargs)


def restore_model(ckpt: Checkpoint) -> AnatomyCodec:
    """Rebuild the network and load weights; validates the architecture hash."""
    model = build_model_from_config(ckpt.config)
    if model.architecture_hash() != ckpt.architecture_hash:
        raise ValueError("checkpoint architecture hash does not match the "
                         "network built from its config")
    state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.model_arrays.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model


def restore_optimizer(ckpt: Checkpoint, model: AnatomyCodec):
    if ckpt.optimizer_groups is None:
        raise ValueError("checkpoint carries no optimizer state")
    groups = ckpt.optimizer_groups
    optimizer = torch.optim.Adam(model.parameters(),
                                 lr=groups[0]["lr"],
                                 betas=tuple(groups[0]["betas"]))
    state: dict[int, dict] = {}
    for name, value in ckpt.optimizer_scalars.items():
        idx, key = name.split(".", 1)
        entry = state.setdefault(int(idx), {})
        entry[key] = torch.tensor(float(value)) if key == "step" else value
    for name, value in ckpt.optimizer_arrays.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(value))
    optimizer.load_state_dict({"state": state, "param_groups": groups})
    return optimizer
