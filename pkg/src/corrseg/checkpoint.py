"""Flat binary checkpoint format ("CFLD").

Layout, all little-endian:

    magic   4 bytes  b"CFLD"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated count times, names in ascending order:
        name_len u32, name UTF-8,
        rank u32, extent u64 per dimension,
        data float64 C-order

Model configuration rides along as scalar entries named ``config.<key>``
so evaluation can reject a checkpoint whose architecture does not match
the requested one.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import DataFormatError
from .model import ModelConfig, PanopticModel

MAGIC = b"CFLD"
VERSION = 1

_CONFIG_KEYS = (
    "n_fourier",
    "s_ref",
    "channels",
    "grid_size",
    "k_thing",
    "k_stuff",
    "use_scm",
    "use_icm",
    "scm_mode",
)
_SCM_MODES = ("global", "axial")


def save_checkpoint(path, arrays: Dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        data = np.asarray(arrays[name], dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, path) -> None:
        self.path = Path(path)
        self.data = self.path.read_bytes()
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError(
                f"{self.path}: truncated at byte {len(self.data)} "
                f"reading {what} ({n} bytes needed at offset {self.pos})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    reader = _Reader(path)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise DataFormatError(
            f"{reader.path}: expected {MAGIC!r} magic at byte 0, found {magic!r}"
        )
    version = reader.u32("version")
    if version != VERSION:
        raise DataFormatError(
            f"{reader.path}: unsupported version {version} at byte 4"
        )
    count = reader.u32("entry count")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = reader.u32("name length")
        name = reader.take(name_len, "entry name").decode("utf-8")
        rank = reader.u32(f"rank of {name!r}")
        shape = struct.unpack(
            f"<{rank}Q", reader.take(8 * rank, f"extents of {name!r}")
        )
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = reader.take(8 * n_items, f"data of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if reader.pos != len(reader.data):
        raise DataFormatError(
            f"{reader.path}: {len(reader.data) - reader.pos} trailing bytes "
            f"at byte {reader.pos}"
        )
    return arrays


def config_entries(cfg: ModelConfig) -> Dict[str, np.ndarray]:
    out = {}
    for key in _CONFIG_KEYS:
        value = getattr(cfg, key)
        if key == "scm_mode":
            value = _SCM_MODES.index(value)
        out[f"config.{key}"] = np.asarray(float(value))
    return out


def model_state(model: PanopticModel) -> Dict[str, np.ndarray]:
    state = {name: p.data.copy() for name, p in model.parameters().items()}
    state.update(config_entries(model.cfg))
    return state


def check_config(arrays: Dict[str, np.ndarray], cfg: ModelConfig, source) -> None:
    """Raise DataFormatError when stored architecture disagrees with cfg."""
    expected = config_entries(cfg)
    mismatched = []
    for key, want in expected.items():
        if key not in arrays:
            raise DataFormatError(f"{source}: checkpoint is missing {key!r}")
        stored = float(np.asarray(arrays[key]).reshape(()))
        if stored != float(want):
            mismatched.append(
                f"{key.split('.', 1)[1]} (checkpoint {stored:g}, "
                f"requested {float(want):g})"
            )
    if mismatched:
        raise DataFormatError(
            f"{source}: checkpoint does not fit the requested model: "
            + "; ".join(mismatched)
        )


def load_model_state(model: PanopticModel, arrays: Dict[str, np.ndarray],
                     source="checkpoint") -> None:
    check_config(arrays, model.cfg, source)
    for name, param in model.parameters().items():
        if name not in arrays:
            raise DataFormatError(f"{source}: missing parameter {name!r}")
        stored = arrays[name]
        if stored.shape != param.data.shape:
            raise DataFormatError(
                f"{source}: parameter {name!r} has shape {stored.shape}, "
                f"expected {param.data.shape}"
            )
        param.data[...] = stored
