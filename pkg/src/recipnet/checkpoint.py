"""Single-file checkpoint: JSON header plus raw little-endian array blocks.

Layout: one UTF-8 JSON line (config, normalization stats, array manifest,
optimizer metadata, training progress), a newline, then the arrays in
manifest order.  Saving the result of a load reproduces the file byte for
byte, and two identical training runs produce identical checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .model import ModelConfig, ModelParams, init_params
from .optim import AdamWState

FORMAT_VERSION = 1


@dataclass
class Normalization:
    """Per-task z-score statistics taken from the training split."""

    mean: np.ndarray  # (T,)
    std: np.ndarray  # (T,), entries >= a small floor

    @classmethod
    def identity(cls, num_tasks: int) -> "Normalization":
        return cls(mean=np.zeros(num_tasks), std=np.ones(num_tasks))

    @classmethod
    def fit(cls, labels: np.ndarray, mask: np.ndarray) -> "Normalization":
        num_tasks = labels.shape[1]
        mean = np.zeros(num_tasks)
        std = np.ones(num_tasks)
        for t in range(num_tasks):
            present = mask[:, t] > 0
            if present.sum() > 0:
                mean[t] = labels[present, t].mean()
                std[t] = max(float(labels[present, t].std()), 1e-8)
        return cls(mean=mean, std=std)

    def standardize(self, labels: np.ndarray) -> np.ndarray:
        return (labels - self.mean) / self.std

    def destandardize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    normalization: Normalization
    optimizer: Optional[AdamWState] = None
    epoch: int = 0
    step: int = 0
    history: List[dict] = field(default_factory=list)


def _array_entry(name: str, arr: np.ndarray) -> dict:
    return {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    params = ckpt.params.parameters()
    bn_states = ckpt.params.bn_states()

    arrays: List[np.ndarray] = []
    manifest: List[dict] = []

    def push(name, arr):
        arr = np.ascontiguousarray(arr)
        manifest.append(_array_entry(name, arr))
        arrays.append(arr)

    push("feature_table", ckpt.params.feature_table.rows)
    for p in params:
        push(f"param:{p.name}", p.value.data)
    for name in sorted(bn_states):
        state = bn_states[name]
        push(f"bn:{name}:mean", state.running_mean)
        push(f"bn:{name}:var", state.running_var)
    if ckpt.optimizer is not None:
        for p in params:
            push(f"adam_m:{p.name}", ckpt.optimizer.m[p.name])
        for p in params:
            push(f"adam_v:{p.name}", ckpt.optimizer.v[p.name])

    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.config.to_dict(),
        "normalization": {
            "mean": ckpt.normalization.mean.tolist(),
            "std": ckpt.normalization.std.tolist(),
        },
        "bn_meta": {
            name: {
                "momentum": bn_states[name].momentum,
                "eps": bn_states[name].eps,
                "num_batches": bn_states[name].num_batches,
            }
            for name in sorted(bn_states)
        },
        "optimizer_step": None if ckpt.optimizer is None else ckpt.optimizer.step,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "history": ckpt.history,
        "arrays": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(b"\n")
        for arr in arrays:
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        blocks: Dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
            blocks[entry["name"]] = arr.astype(np.dtype(entry["dtype"]), copy=True)

    config = ModelConfig.from_dict(header["model_config"])
    params = init_params(config)
    params.feature_table.rows = blocks["feature_table"]
    for p in params.parameters():
        p.value.data = blocks[f"param:{p.name}"].copy()
        p.value.grad = np.zeros_like(p.value.data)

    bn_states = params.bn_states()
    for name, meta in header["bn_meta"].items():
        state = bn_states[name]
        state.running_mean = blocks[f"bn:{name}:mean"].copy()
        state.running_var = blocks[f"bn:{name}:var"].copy()
        state.momentum = meta["momentum"]
        state.eps = meta["eps"]
        state.num_batches = meta["num_batches"]

    optimizer = None
    if header["optimizer_step"] is not None:
        optimizer = AdamWState(
            m={p.name: blocks[f"adam_m:{p.name}"].copy() for p in params.parameters()},
            v={p.name: blocks[f"adam_v:{p.name}"].copy() for p in params.parameters()},
            step=header["optimizer_step"],
        )

    normalization = Normalization(
        mean=np.asarray(header["normalization"]["mean"], dtype=np.float64),
        std=np.asarray(header["normalization"]["std"], dtype=np.float64),
    )
    return Checkpoint(
        config=config,
        params=params,
        normalization=normalization,
        optimizer=optimizer,
        epoch=header["epoch"],
        step=header["step"],
        history=header["history"],
    )
