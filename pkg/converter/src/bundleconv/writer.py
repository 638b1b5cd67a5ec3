"""Bundle directory writer implementing the pruning tool's file formats.

Kept independent of the pruning tool's code on purpose: the bundle
layout (config.json / tensors.bin / vocab.txt) is the interface.

tensors.bin: u32 tensor count, then per tensor u32 name length, UTF-8
name, u8 dtype (0 = f32), u8 rank, rank x u64 dims (little-endian), and
the row-major f32 payload. vocab.txt: one token per line, line number =
id, non-printable bytes (and backslash) escaped as \\xNN.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_PRINTABLE = set(range(0x20, 0x7F)) - {ord("\\")}

LAYER_SUFFIXES = (
    "attn.wq", "attn.wk", "attn.wv", "attn.wo",
    "ffn.up", "ffn.gate", "ffn.down", "norm1", "norm2",
)


def canonical_tensor_order(n_layers: int) -> list[str]:
    names = ["embed", "final_norm", "unembed"]
    for l in range(n_layers):
        names.extend(f"layer.{l}.{suffix}" for suffix in LAYER_SUFFIXES)
    return names


def encode_tensors(tensors: dict[str, np.ndarray], order: list[str]) -> bytes:
    parts = [struct.pack("<I", len(order))]
    for name in order:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def escape_token(token: bytes) -> str:
    return "".join(chr(b) if b in _PRINTABLE else f"\\x{b:02x}" for b in token)


def encode_vocab(tokens: list[bytes]) -> bytes:
    return "".join(escape_token(t) + "\n" for t in tokens).encode("ascii")


def write_bundle(out_dir, config: dict, tensors: dict[str, np.ndarray],
                 vocab: list[bytes]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    order = canonical_tensor_order(config["n_layers"])
    missing = [n for n in order if n not in tensors]
    if missing:
        raise ValueError(f"bundle is missing tensors: {missing[:4]}...")
    (out / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / "tensors.bin").write_bytes(encode_tensors(tensors, order))
    (out / "vocab.txt").write_bytes(encode_vocab(vocab))
