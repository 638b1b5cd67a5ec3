"""Checkpoint-to-bundle conversion: name mapping, truncation, vocab export.

The llama-like profile maps Hugging-Face-style decoder checkpoints
(embed_tokens / self_attn.{q,k,v,o}_proj / mlp.{gate,up,down}_proj /
input_layernorm / post_attention_layernorm / norm / lm_head) onto the
bundle's canonical names. Truncation keeps the FIRST k layers, FFN
channels, and heads, and is recorded under config meta so downstream
tools can tell a sliced toy from a full conversion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .reader import CheckpointError, CheckpointReader


@dataclass(frozen=True)
class NameMap:
    """Source-name templates for one architecture family."""

    globals: dict[str, str]  # canonical -> source template
    per_layer: dict[str, str]  # canonical suffix -> source template with {i}
    optional: tuple[str, ...] = ()  # canonical names that may be synthesized


LLAMA_LIKE = NameMap(
    globals={
        "embed": "model.embed_tokens.weight",
        "final_norm": "model.norm.weight",
        "unembed": "lm_head.weight",
    },
    per_layer={
        "attn.wq": "model.layers.{i}.self_attn.q_proj.weight",
        "attn.wk": "model.layers.{i}.self_attn.k_proj.weight",
        "attn.wv": "model.layers.{i}.self_attn.v_proj.weight",
        "attn.wo": "model.layers.{i}.self_attn.o_proj.weight",
        "ffn.up": "model.layers.{i}.mlp.up_proj.weight",
        "ffn.gate": "model.layers.{i}.mlp.gate_proj.weight",
        "ffn.down": "model.layers.{i}.mlp.down_proj.weight",
        "norm1": "model.layers.{i}.input_layernorm.weight",
        "norm2": "model.layers.{i}.post_attention_layernorm.weight",
    },
    optional=("unembed",),  # tied embeddings reuse the embed matrix
)

PROFILES = {"llama-like": LLAMA_LIKE}


@dataclass
class Truncation:
    n_layers: int | None = None
    d_ff: int | None = None
    n_heads: int | None = None

    def any(self) -> bool:
        return any(v is not None for v in (self.n_layers, self.d_ff, self.n_heads))

    def to_meta(self) -> dict:
        return {k: v for k, v in
                (("n_layers", self.n_layers), ("d_ff", self.d_ff), ("n_heads", self.n_heads))
                if v is not None}


@dataclass
class SourceConfig:
    hidden_size: int
    intermediate_size: int
    num_hidden_layers: int
    num_attention_heads: int
    num_key_value_heads: int
    vocab_size: int
    max_position_embeddings: int
    rms_norm_eps: float
    rope_theta: float
    tie_word_embeddings: bool = False
    head_dim: int = field(init=False)

    def __post_init__(self):
        if self.hidden_size % self.num_attention_heads:
            raise CheckpointError("hidden_size not divisible by num_attention_heads")
        self.head_dim = self.hidden_size // self.num_attention_heads


def load_source_config(source_dir: Path) -> SourceConfig:
    path = Path(source_dir) / "config.json"
    if not path.is_file():
        raise FileNotFoundError(f"missing source config: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    try:
        return SourceConfig(
            hidden_size=int(doc["hidden_size"]),
            intermediate_size=int(doc["intermediate_size"]),
            num_hidden_layers=int(doc["num_hidden_layers"]),
            num_attention_heads=int(doc["num_attention_heads"]),
            num_key_value_heads=int(doc.get("num_key_value_heads", doc["num_attention_heads"])),
            vocab_size=int(doc["vocab_size"]),
            max_position_embeddings=int(doc.get("max_position_embeddings", 2048)),
            rms_norm_eps=float(doc.get("rms_norm_eps", 1e-5)),
            rope_theta=float(doc.get("rope_theta", 10000.0)),
            tie_word_embeddings=bool(doc.get("tie_word_embeddings", False)),
        )
    except KeyError as exc:
        raise CheckpointError(f"source config missing key {exc}") from exc


def load_vocab(source_dir: Path, vocab_size: int) -> list[bytes]:
    """Read vocab.txt (one token per line) or vocab.json ({token: id}).

    Shorter tokenizer tables are padded with reserved placeholder tokens
    up to the model's vocab_size.
    """
    txt = Path(source_dir) / "vocab.txt"
    js = Path(source_dir) / "vocab.json"
    if txt.is_file():
        lines = txt.read_bytes().split(b"\n")
        if lines and lines[-1] == b"":
            lines.pop()
        tokens = list(lines)
    elif js.is_file():
        table = json.loads(js.read_text(encoding="utf-8"))
        by_id: dict[int, bytes] = {}
        for token, tid in table.items():
            tid = int(tid)
            if tid in by_id:
                raise CheckpointError(f"vocab.json: duplicate id {tid}")
            by_id[tid] = token.encode("utf-8")
        tokens = []
        for i in range(len(by_id)):
            if i not in by_id:
                raise CheckpointError(f"vocab.json: ids not dense (missing {i})")
            tokens.append(by_id[i])
    else:
        raise FileNotFoundError(f"no vocab.txt or vocab.json in {source_dir}")
    if len(tokens) > vocab_size:
        raise CheckpointError(
            f"tokenizer has {len(tokens)} entries but model vocab_size is {vocab_size}"
        )
    tokens += [f"<unused{i}>".encode() for i in range(vocab_size - len(tokens))]
    return tokens


def _head_rows(matrix: np.ndarray, keep_heads: int, head_dim: int) -> np.ndarray:
    return matrix[: keep_heads * head_dim]


def _replicate_kv(matrix: np.ndarray, kv_heads: int, group: int, head_dim: int) -> np.ndarray:
    blocks = matrix.reshape(kv_heads, head_dim, -1)
    return np.repeat(blocks, group, axis=0).reshape(kv_heads * group * head_dim, -1)


def convert(
    source_dir,
    profile: str = "llama-like",
    truncation: Truncation | None = None,
    out_dir=None,
    replicate_kv: bool = False,
) -> Path:
    """Convert a safetensors checkpoint directory into a bundle directory."""
    source_dir = Path(source_dir)
    truncation = truncation or Truncation()
    if profile not in PROFILES:
        raise CheckpointError(f"unknown profile {profile!r} (have {sorted(PROFILES)})")
    name_map = PROFILES[profile]
    src = load_source_config(source_dir)
    reader = CheckpointReader(source_dir)

    n_layers = truncation.n_layers if truncation.n_layers is not None else src.num_hidden_layers
    d_ff = truncation.d_ff if truncation.d_ff is not None else src.intermediate_size
    n_heads = truncation.n_heads if truncation.n_heads is not None else src.num_attention_heads
    if not 1 <= n_layers <= src.num_hidden_layers:
        raise CheckpointError(f"truncate-layers {n_layers} outside [1, {src.num_hidden_layers}]")
    if not 1 <= d_ff <= src.intermediate_size:
        raise CheckpointError(f"truncate-dff {d_ff} outside [1, {src.intermediate_size}]")
    if not 1 <= n_heads <= src.num_attention_heads:
        raise CheckpointError(f"truncate-heads {n_heads} outside [1, {src.num_attention_heads}]")

    group = src.num_attention_heads // max(src.num_key_value_heads, 1)
    if src.num_key_value_heads != src.num_attention_heads and not replicate_kv:
        raise CheckpointError(
            f"grouped-query source ({src.num_key_value_heads} kv heads for "
            f"{src.num_attention_heads} query heads) needs an explicit replication "
            "rule; pass --replicate-kv to duplicate each kv head across its group"
        )

    tensors: dict[str, np.ndarray] = {}

    def fetch(canonical: str, source_name: str) -> np.ndarray | None:
        try:
            return reader.tensor(source_name)
        except CheckpointError:
            if canonical in name_map.optional:
                return None
            raise CheckpointError(
                f"required tensor {canonical!r} not found under source name {source_name!r}"
            ) from None

    embed = fetch("embed", name_map.globals["embed"])
    unembed = fetch("unembed", name_map.globals["unembed"])
    if unembed is None:
        if not src.tie_word_embeddings:
            raise CheckpointError(
                "source has no lm_head.weight and does not declare tied embeddings"
            )
        unembed = embed.copy()
    tensors["embed"] = embed
    tensors["unembed"] = unembed
    tensors["final_norm"] = fetch("final_norm", name_map.globals["final_norm"])

    hd = src.head_dim
    for l in range(n_layers):
        for suffix, template in name_map.per_layer.items():
            canonical = f"layer.{l}.{suffix}"
            arr = fetch(canonical, template.format(i=l))
            if suffix in ("attn.wk", "attn.wv") and group > 1:
                arr = _replicate_kv(arr, src.num_key_value_heads, group, hd)
            if suffix in ("attn.wq", "attn.wk", "attn.wv"):
                arr = _head_rows(arr, n_heads, hd)
            elif suffix == "attn.wo":
                arr = arr[:, : n_heads * hd]
            elif suffix in ("ffn.up", "ffn.gate"):
                arr = arr[:d_ff]
            elif suffix == "ffn.down":
                arr = arr[:, :d_ff]
            tensors[canonical] = arr

    config: dict = {
        "n_layers": n_layers,
        "d_model": src.hidden_size,
        "n_heads": src.num_attention_heads,
        "head_dim": hd,
        "d_ff": d_ff,
        "vocab_size": src.vocab_size,
        "max_seq_len": src.max_position_embeddings,
        "norm_eps": src.rms_norm_eps,
        "rope_base": src.rope_theta,
        "layers": [],
    }
    if n_heads != src.num_attention_heads:
        # base head geometry must keep n_heads x head_dim == d_model, so a
        # narrower attention path is expressed through per-layer overrides
        config["layers"] = [
            {
                "layer_index": l,
                "d_ff_actual": d_ff,
                "n_heads_actual": n_heads,
                "v_dims": [hd] * n_heads,
            }
            for l in range(n_layers)
        ]
    meta: dict = {"source": source_dir.name, "profile": profile}
    if truncation.any():
        meta["truncation"] = truncation.to_meta()
    if group > 1:
        meta["kv_replication_group"] = group
    config["meta"] = meta

    vocab = load_vocab(source_dir, src.vocab_size)
    out = Path(out_dir) if out_dir is not None else source_dir.with_name(source_dir.name + "-bundle")

    from .writer import write_bundle

    write_bundle(out, config, tensors, vocab)
    return out
