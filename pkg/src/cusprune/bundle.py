"""On-disk model bundle: config.json + tensors.bin + vocab.txt.

tensors.bin layout (little-endian):
    u32 tensor_count
    per tensor: u32 name_len, name bytes (UTF-8), u8 dtype (0 = f32),
                u8 rank, rank x u64 dims, row-major f32 payload

vocab.txt: one token per line, line number = token id; bytes outside
printable ASCII (plus backslash itself) are escaped as \\xNN.

Saves are deterministic: tensors are emitted in canonical config order,
so two saves of the same model produce byte-identical files. Bundle
writes go to a temp directory first and are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .model import LayerOverride, ModelConfig, WeightStore, validate_weights

_PRINTABLE = set(range(0x20, 0x7F)) - {ord("\\")}


@dataclass(frozen=True)
class Vocab:
    """Token table; index in `tokens` is the token id."""

    tokens: tuple[bytes, ...]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValidationError("vocab must contain at least one token")

    def __len__(self) -> int:
        return len(self.tokens)


def byte_vocab() -> Vocab:
    """The 256-entry byte-level vocab: id == byte value."""
    return Vocab(tuple(bytes([b]) for b in range(256)))


def escape_token(token: bytes) -> str:
    out = []
    for b in token:
        if b in _PRINTABLE:
            out.append(chr(b))
        else:
            out.append(f"\\x{b:02x}")
    return "".join(out)


def unescape_token(line: str) -> bytes:
    out = bytearray()
    i = 0
    while i < len(line):
        if line[i] == "\\":
            if line[i + 1 : i + 2] != "x" or len(line) < i + 4:
                raise ValidationError(f"truncated byte escape in vocab line: {line!r}")
            try:
                out.append(int(line[i + 2 : i + 4], 16))
            except ValueError:
                raise ValidationError(f"bad byte escape in vocab line: {line!r}") from None
            i += 4
        else:
            out.append(ord(line[i]))
            i += 1
    return bytes(out)


def encode_vocab(vocab: Vocab) -> bytes:
    return "".join(escape_token(t) + "\n" for t in vocab.tokens).encode("ascii")


def decode_vocab(data: bytes) -> Vocab:
    text = data.decode("ascii")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocab(tuple(unescape_token(line) for line in lines))


def encode_tensors(config: ModelConfig, weights: WeightStore) -> bytes:
    """Serialize weights in canonical order; deterministic byte output."""
    parts = [struct.pack("<I", len(config.tensor_shapes()))]
    for name in config.tensor_shapes():
        t = np.ascontiguousarray(weights[name], dtype=np.float32)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", 0, t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(t.tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> WeightStore:
    weights: WeightStore = {}
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise ValidationError("truncated tensors.bin")
        chunk = data[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2))
        if dtype != 0:
            raise ValidationError(f"tensor {name}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        n_elems = int(np.prod(dims)) if dims else 1
        payload = take(4 * n_elems)
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if name in weights:
            raise ValidationError(f"duplicate tensor name {name}")
        weights[name] = arr
    if off != len(data):
        raise ValidationError("trailing bytes in tensors.bin")
    return weights


def fingerprint(config: ModelConfig, weights: WeightStore) -> str:
    """sha256 of the canonical tensors.bin serialization."""
    return hashlib.sha256(encode_tensors(config, weights)).hexdigest()


def config_to_json(config: ModelConfig) -> dict:
    doc = {
        "n_layers": config.n_layers,
        "d_model": config.d_model,
        "n_heads": config.n_heads,
        "head_dim": config.head_dim,
        "d_ff": config.d_ff,
        "vocab_size": config.vocab_size,
        "max_seq_len": config.max_seq_len,
        "norm_eps": config.norm_eps,
        "rope_base": config.rope_base,
        "layers": [
            {
                "layer_index": ov.layer_index,
                "d_ff_actual": ov.d_ff_actual,
                "n_heads_actual": ov.n_heads_actual,
                "v_dims": list(ov.v_dims),
            }
            for ov in config.layers
        ],
    }
    if config.meta:
        doc["meta"] = config.meta
    return doc


def config_from_json(doc: dict) -> ModelConfig:
    required = {"n_layers", "d_model", "n_heads", "head_dim", "d_ff", "vocab_size", "max_seq_len"}
    missing = required - set(doc)
    if missing:
        raise ValidationError(f"config.json missing keys: {sorted(missing)}")
    known = required | {"norm_eps", "rope_base", "layers", "meta"}
    extra = set(doc) - known
    if extra:
        raise ValidationError(f"config.json has unknown keys: {sorted(extra)}")
    overrides = tuple(
        LayerOverride(
            layer_index=int(ov["layer_index"]),
            d_ff_actual=int(ov["d_ff_actual"]),
            n_heads_actual=int(ov["n_heads_actual"]),
            v_dims=tuple(int(v) for v in ov["v_dims"]),
        )
        for ov in doc.get("layers", [])
    )
    return ModelConfig(
        n_layers=int(doc["n_layers"]),
        d_model=int(doc["d_model"]),
        n_heads=int(doc["n_heads"]),
        head_dim=int(doc["head_dim"]),
        d_ff=int(doc["d_ff"]),
        vocab_size=int(doc["vocab_size"]),
        max_seq_len=int(doc["max_seq_len"]),
        norm_eps=float(doc.get("norm_eps", 1e-5)),
        rope_base=float(doc.get("rope_base", 10000.0)),
        layers=overrides,
        meta=dict(doc.get("meta", {})),
    )


def save_bundle(config: ModelConfig, weights: WeightStore, vocab: Vocab, path) -> None:
    """Write a bundle directory atomically (temp dir + rename)."""
    validate_weights(config, weights)
    if len(vocab) != config.vocab_size:
        raise ValidationError(f"vocab has {len(vocab)} tokens, config says {config.vocab_size}")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=target.name + ".tmp", dir=target.parent))
    try:
        (tmp / "config.json").write_text(
            json.dumps(config_to_json(config), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (tmp / "tensors.bin").write_bytes(encode_tensors(config, weights))
        (tmp / "vocab.txt").write_bytes(encode_vocab(vocab))
        if target.exists():
            shutil.rmtree(target)
        os.rename(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_bundle(path) -> tuple[ModelConfig, WeightStore, Vocab]:
    """Load and validate a bundle directory."""
    root = Path(path)
    for fname in ("config.json", "tensors.bin", "vocab.txt"):
        if not (root / fname).is_file():
            raise FileNotFoundError(f"bundle missing {fname}: {root / fname}")
    try:
        doc = json.loads((root / "config.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed config.json: {exc}") from exc
    config = config_from_json(doc)
    weights = decode_tensors((root / "tensors.bin").read_bytes())
    validate_weights(config, weights)
    vocab = decode_vocab((root / "vocab.txt").read_bytes())
    if len(vocab) != config.vocab_size:
        raise ValidationError(f"vocab has {len(vocab)} tokens, config says {config.vocab_size}")
    return config, weights, vocab
