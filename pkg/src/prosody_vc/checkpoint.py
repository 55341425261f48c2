"""Versioned single-file checkpoint container.

Layout (little-endian)::

    8 bytes   magic b"PVCCKPT\\x00"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON, keys sorted
    payload   raw tensor bytes, concatenated in header order

The header holds the stage tag, global step, configuration snapshot,
speaker list, optimizer hyperparameters and a tensor index of
``{name, dtype, shape, offset, nbytes}`` records. Parameter tensors are named
``model/<module path>``; optimizer state is ``optim/<optimizer>/<index>/<key>``.
Readers accept any version up to their own and ignore unknown header keys.
"""
from __future__ import annotations

import copy
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PVCCKPT\x00"
FORMAT_VERSION = 1
STAGES = ("pretrain", "finetune")
_PREFIX = struct.Struct("<8sIQ")
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.int32: "<i4",
           torch.bool: "|b1"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class StageError(ValueError):
    pass


def check_transition(current: str, requested: str) -> None:
    """Only pretrain -> finetune is a legal stage change."""
    if (current, requested) != ("pretrain", "finetune"):
        raise StageError(f"illegal stage transition {current!r} -> {requested!r}; only pretrain -> finetune is allowed")


@dataclass
class Checkpoint:
    stage: str
    global_step: int
    config: dict
    params: dict[str, torch.Tensor]
    speakers: list[str]
    optimizers: dict[str, dict] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise StageError(f"unknown stage tag {self.stage!r}")

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.stage, self.global_step, copy.deepcopy(self.config),
                          {k: v.clone() for k, v in self.params.items()}, list(self.speakers),
                          copy.deepcopy(self.optimizers), copy.deepcopy(self.extra))

    def parameter_bytes(self) -> bytes:
        return b"".join(_tensor_bytes(self.params[k]) for k in self.params)

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return load_checkpoint(path)


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_DTYPES[t.dtype]).tobytes()


def _flatten_optimizer(name: str, state: dict):
    tensors, meta = {}, {"param_groups": state.get("param_groups", []), "state": {}}
    # canonical order so a loaded checkpoint re-serializes to the same bytes
    slots_by_idx = state.get("state", {})
    for idx in sorted(slots_by_idx, key=int):
        slots = slots_by_idx[idx]
        meta["state"][str(idx)] = {}
        for key in sorted(slots):
            val = slots[key]
            if torch.is_tensor(val):
                tensors[f"optim/{name}/{idx}/{key}"] = val
                meta["state"][str(idx)][key] = None
            else:
                meta["state"][str(idx)][key] = val
    return tensors, meta


def _unflatten_optimizer(name: str, meta: dict, tensors: dict) -> dict:
    state = {}
    for idx, slots in sorted(meta["state"].items(), key=lambda kv: int(kv[0])):
        state[int(idx)] = {k: (tensors[f"optim/{name}/{idx}/{k}"] if v is None else v) for k, v in slots.items()}
    groups = [dict(g, betas=tuple(g["betas"])) if "betas" in g else g for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    path = Path(path)
    tensors = {f"model/{k}": v for k, v in ckpt.params.items()}
    opt_meta = {}
    for name, state in sorted(ckpt.optimizers.items()):
        t, m = _flatten_optimizer(name, state)
        tensors.update(t)
        opt_meta[name] = m
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        raw = _tensor_bytes(t)
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "stage": ckpt.stage, "global_step": ckpt.global_step,
              "config": ckpt.config, "speakers": ckpt.speakers, "optimizers": opt_meta, "extra": ckpt.extra,
              "tensors": index}
    head = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
            fh.write(head)
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version > FORMAT_VERSION:
        raise ValueError(f"{path}: checkpoint format {version} is newer than supported {FORMAT_VERSION}")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + head_len])
    base = _PREFIX.size + head_len
    tensors = {}
    for rec in header["tensors"]:
        start = base + rec["offset"]
        arr = np.frombuffer(raw, dtype=rec["dtype"], count=int(np.prod(rec["shape"], dtype=np.int64)), offset=start)
        tensors[rec["name"]] = torch.from_numpy(arr.reshape(rec["shape"]).copy()).to(_TORCH[rec["dtype"]])
    params = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    optimizers = {name: _unflatten_optimizer(name, meta, tensors)
                  for name, meta in header.get("optimizers", {}).items()}
    return Checkpoint(header["stage"], header["global_step"], header["config"], params, header["speakers"],
                      optimizers, header.get("extra", {}))
