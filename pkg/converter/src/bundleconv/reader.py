"""Safetensors container reading: header parse plus lazy tensor slices.

Format: u64 little-endian header length, UTF-8 JSON header mapping
tensor name -> {dtype, shape, data_offsets}, then one flat byte buffer.
Sharded checkpoints are handled through model.safetensors.index.json.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    """Source checkpoint is malformed or unsupported."""


_DTYPES = {"F32", "F16", "BF16"}


class SafetensorsFile:
    def __init__(self, path: Path):
        self.path = Path(path)
        data = self.path.read_bytes()
        if len(data) < 8:
            raise CheckpointError(f"{path}: too short for a safetensors file")
        (header_len,) = struct.unpack("<Q", data[:8])
        if 8 + header_len > len(data):
            raise CheckpointError(f"{path}: header length {header_len} exceeds file size")
        try:
            header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: bad safetensors header: {exc}") from exc
        self._buffer = data[8 + header_len :]
        self.entries = {k: v for k, v in header.items() if k != "__metadata__"}

    def names(self) -> list[str]:
        return list(self.entries)

    def tensor(self, name: str) -> np.ndarray:
        """Read one tensor as float32 (F16/BF16 widen losslessly)."""
        if name not in self.entries:
            raise CheckpointError(f"{self.path}: no tensor {name!r}")
        entry = self.entries[name]
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise CheckpointError(f"{self.path}: tensor {name!r} has unsupported dtype {dtype}")
        start, end = entry["data_offsets"]
        raw = self._buffer[start:end]
        shape = tuple(entry["shape"])
        if dtype == "F32":
            arr = np.frombuffer(raw, dtype="<f4")
        elif dtype == "F16":
            arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
        else:  # BF16: upper 16 bits of an f32
            bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
            arr = bits.view(np.float32)
        if arr.size != int(np.prod(shape)):  # np.prod(()) == 1 covers scalars
            raise CheckpointError(f"{self.path}: tensor {name!r} payload does not match shape")
        return np.ascontiguousarray(arr.reshape(shape))


class CheckpointReader:
    """Uniform access over a single-file or sharded safetensors checkpoint."""

    def __init__(self, source_dir: Path):
        self.source_dir = Path(source_dir)
        index = self.source_dir / "model.safetensors.index.json"
        single = self.source_dir / "model.safetensors"
        self._files: dict[str, SafetensorsFile] = {}
        self._location: dict[str, str] = {}
        if index.is_file():
            doc = json.loads(index.read_text(encoding="utf-8"))
            self._location = dict(doc["weight_map"])
        elif single.is_file():
            st = SafetensorsFile(single)
            self._files["model.safetensors"] = st
            self._location = {name: "model.safetensors" for name in st.names()}
        else:
            candidates = sorted(self.source_dir.glob("*.safetensors"))
            if len(candidates) != 1:
                raise CheckpointError(
                    f"{source_dir}: expected model.safetensors, an index, or exactly one "
                    f"*.safetensors file (found {len(candidates)})"
                )
            st = SafetensorsFile(candidates[0])
            self._files[candidates[0].name] = st
            self._location = {name: candidates[0].name for name in st.names()}

    def names(self) -> list[str]:
        return list(self._location)

    def tensor(self, name: str) -> np.ndarray:
        if name not in self._location:
            raise CheckpointError(f"checkpoint has no tensor {name!r}")
        fname = self._location[name]
        if fname not in self._files:
            self._files[fname] = SafetensorsFile(self.source_dir / fname)
        return self._files[fname].tensor(name)
