"""Binary checkpoint files: magic "RFMR", version, config JSON, named tensors.

Layout, all integers little-endian uint32 unless noted:

    magic   4 bytes  b"RFMR"
    version uint32   currently 1; unknown versions are rejected
    clen    uint32   length of the UTF-8 config JSON
    config  clen bytes
    count   uint32   number of named tensors
    per tensor: nlen uint32, name (nlen bytes UTF-8), rank uint32,
                dims (rank x uint32), data (prod(dims) x float64 LE)

Dataset statistics and optimizer state ride along as reserved tensor names
("stats.*", "opt.*", "train.*") so that one file restores both inference
and training.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .data import DatasetStats
from .errors import CheckpointError
from .model import ModelConfig, ReinformerModel

MAGIC = b"RFMR"
VERSION = 1

_STATS_KEYS = ("stats.state_mean", "stats.state_std", "stats.return_bounds")


def _write_tensor(fh, name: str, array: np.ndarray) -> None:
    data = np.ascontiguousarray(array, dtype="<f8")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return buf


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(dims)
    return name, data.astype(np.float64)


def save_checkpoint(path, config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", _read_exact(fh, 4))
        raw = json.loads(_read_exact(fh, clen).decode("utf-8"))
        raw["log_std_bounds"] = tuple(raw["log_std_bounds"])
        config = ModelConfig(**raw)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = dict(_read_tensor(fh) for _ in range(count))
    return config, tensors


def save_model(path, model: ReinformerModel, stats: DatasetStats | None = None,
               extras: dict[str, np.ndarray] | None = None) -> None:
    """Model parameters plus optional dataset stats and training extras."""
    tensors = {f"model.{name}": arr for name, arr in model.state_arrays().items()}
    if stats is not None:
        tensors["stats.state_mean"] = stats.state_mean
        tensors["stats.state_std"] = stats.state_std
        tensors["stats.return_bounds"] = np.array([
            stats.min_dataset_return, stats.max_dataset_return,
            stats.ref_min_return, stats.ref_max_return])
    for name, arr in (extras or {}).items():
        tensors[name] = np.asarray(arr, dtype=np.float64)
    save_checkpoint(path, model.config, tensors)


def load_model(path) -> tuple[ReinformerModel, DatasetStats | None, dict[str, np.ndarray]]:
    config, tensors = load_checkpoint(path)
    model = ReinformerModel(config)
    model.load_state_arrays({name[len("model."):]: arr for name, arr in tensors.items()
                             if name.startswith("model.")})
    stats = None
    if all(key in tensors for key in _STATS_KEYS):
        bounds = tensors["stats.return_bounds"]
        stats = DatasetStats(
            state_mean=tensors["stats.state_mean"],
            state_std=tensors["stats.state_std"],
            min_dataset_return=float(bounds[0]), max_dataset_return=float(bounds[1]),
            ref_min_return=float(bounds[2]), ref_max_return=float(bounds[3]))
    extras = {name: arr for name, arr in tensors.items()
              if not name.startswith("model.") and name not in _STATS_KEYS}
    return model, stats, extras
