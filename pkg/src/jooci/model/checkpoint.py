"""Checkpoint archive: one ``.npz`` of named tensors plus a JSON manifest.

Entry naming: ``param::<dotted name>`` for parameters, ``buffer::<dotted
name>`` for batch-norm running statistics, ``adam.m::`` / ``adam.v::`` for
optimizer moments, and ``__manifest__`` for the JSON manifest (format
version, config snapshot, step/stage counters, optimizer scalars).  Writes
are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Optional

import numpy as np

from .config import ModelConfig
from .network import JoociModel

FORMAT_VERSION = 1


def save_checkpoint(path: str, model: JoociModel, step: int = 0, stage: int = 0,
                    optimizer_state: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        arrays[f"param::{name}"] = p.data
    for name, buf in model.named_buffers():
        arrays[f"buffer::{name}"] = buf
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "step": int(step),
        "stage": int(stage),
    }
    if extra:
        manifest.update(extra)
    if optimizer_state is not None:
        manifest["adam"] = optimizer_state["scalars"]
        for name, m in optimizer_state["m"].items():
            arrays[f"adam.m::{name}"] = m
        for name, v in optimizer_state["v"].items():
            arrays[f"adam.v::{name}"] = v
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)

    out_dir = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Checkpoint:
    def __init__(self, manifest: dict, arrays: dict[str, np.ndarray]):
        self.manifest = manifest
        self.arrays = arrays

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.manifest["config"])

    @property
    def step(self) -> int:
        return self.manifest["step"]

    @property
    def stage(self) -> int:
        return self.manifest["stage"]

    def build_model(self) -> JoociModel:
        model = JoociModel(self.config, seed=0)
        self.restore_model(model)
        return model

    def restore_model(self, model: JoociModel) -> None:
        params = dict(model.named_parameters())
        for key, arr in self.arrays.items():
            kind, _, name = key.partition("::")
            if kind == "param":
                if name not in params:
                    raise KeyError(f"checkpoint parameter {name!r} not in model")
                if params[name].data.shape != arr.shape:
                    raise ValueError(
                        f"checkpoint parameter {name!r} has shape {arr.shape}, "
                        f"model expects {params[name].data.shape}")
                params[name].data = arr.astype(params[name].data.dtype)
            elif kind == "buffer":
                model.set_buffer(name, arr)

    def optimizer_state(self) -> Optional[dict]:
        if "adam" not in self.manifest:
            return None
        state = {"scalars": self.manifest["adam"], "m": {}, "v": {}}
        for key, arr in self.arrays.items():
            kind, _, name = key.partition("::")
            if kind == "adam.m":
                state["m"][name] = arr
            elif kind == "adam.v":
                state["v"][name] = arr
        return state


def load_checkpoint(path: str) -> Checkpoint:
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    manifest = json.loads(bytes(arrays.pop("__manifest__")).decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    return Checkpoint(manifest, arrays)
