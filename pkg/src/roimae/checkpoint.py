"""Binary checkpoint format.

Layout (little-endian)::

    b"ROIMAE01"                 8-byte magic
    u64 header_len
    header                      UTF-8 JSON, sorted keys, compact separators
    float64 arrays              concatenated in directory order

The header carries the format version, the model config, free-form
metadata and a directory of ``{name, shape, offset, nbytes}`` entries whose
offsets are relative to the start of the array section. Parameter arrays
use the model's names; optimiser moments, when saved, use ``optim.m.`` and
``optim.v.`` prefixes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CompatibilityError
from .model import ModelConfig, TransformerModel, parameter_shapes
from .autodiff import Tensor

MAGIC = b"ROIMAE01"
FORMAT_VERSION = 1
_OPT_PREFIXES = ("optim.m.", "optim.v.")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    arrays: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: TransformerModel, metadata=None, optimizer=None) -> "Checkpoint":
        arrays = {n: a.copy() for n, a in model.state_arrays().items()}
        if optimizer is not None:
            for n in optimizer.m:
                arrays["optim.m." + n] = optimizer.m[n].copy()
                arrays["optim.v." + n] = optimizer.v[n].copy()
        return cls(model.cfg, arrays, dict(metadata or {}))

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.arrays.items() if not n.startswith(_OPT_PREFIXES)}

    def to_model(self) -> TransformerModel:
        params = {n: Tensor(a.copy(), requires_grad=True) for n, a in self.param_arrays().items()}
        return TransformerModel(self.model_config, params)

    def optimizer_moments(self):
        m = {n[len("optim.m."):]: a for n, a in self.arrays.items() if n.startswith("optim.m.")}
        v = {n[len("optim.v."):]: a for n, a in self.arrays.items() if n.startswith("optim.v.")}
        return (m, v) if m else None


def to_bytes(ckpt: Checkpoint) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.version,
        "model_config": ckpt.model_config.to_dict(),
        "metadata": ckpt.metadata,
        "tensors": directory,
        "data_bytes": offset,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def from_bytes(buf: bytes, expected_rois: int | None = None) -> Checkpoint:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {header.get('format_version')} unsupported (expected {FORMAT_VERSION})"
        )
    base = 16 + hlen
    if len(buf) != base + header["data_bytes"]:
        raise CheckpointError(
            f"truncated checkpoint: {len(buf) - base} data bytes, header declares {header['data_bytes']}"
        )
    cfg = ModelConfig.from_dict(header["model_config"])
    if expected_rois is not None and cfg.num_rois != expected_rois:
        raise CompatibilityError(f"checkpoint has num_rois={cfg.num_rois} but data has {expected_rois} ROIs")
    arrays = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        if int(np.prod(shape)) * 8 != ent["nbytes"]:
            raise CheckpointError(f"{ent['name']}: shape {shape} disagrees with {ent['nbytes']} bytes")
        lo = base + ent["offset"]
        arrays[ent["name"]] = np.frombuffer(buf[lo:lo + ent["nbytes"]], dtype="<f8").astype(np.float64).reshape(shape)
    expected = parameter_shapes(cfg)
    params = [n for n in arrays if not n.startswith(_OPT_PREFIXES)]
    if params != list(expected):
        diff = sorted(set(params) ^ set(expected))
        raise CompatibilityError(f"tensor names do not match the embedded model config: {diff[:5]}")
    for n, shp in expected.items():
        if arrays[n].shape != shp:
            raise CompatibilityError(f"{n}: stored shape {arrays[n].shape}, config implies {shp}")
    return Checkpoint(cfg, arrays, header["metadata"], header["format_version"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))


def load_checkpoint(path, expected_rois: int | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), expected_rois)
