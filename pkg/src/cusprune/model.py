"""Deterministic CPU forward pass for a small decoder-only transformer.

Architecture is fixed: pre-norm residual blocks with RMSNorm, rotary
position embedding on q/k, multi-head attention, and a gated-silu FFN
(down @ (silu(gate @ z) * (up @ z))). All tensors are float32; norm and
softmax reductions accumulate in float64 so results are reproducible
across platforms and BLAS thread counts.

Pruned models are first-class: each layer may carry an override giving
its actual FFN width, its surviving head count, and the value-path width
of every surviving head. A sublayer whose width shrank to zero degrades
to the identity on the residual stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import ValidationError

WeightStore = dict[str, np.ndarray]

LAYER_TENSOR_SUFFIXES = (
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ffn.up",
    "ffn.gate",
    "ffn.down",
    "norm1",
    "norm2",
)
GLOBAL_TENSOR_NAMES = ("embed", "final_norm", "unembed")


@dataclass(frozen=True)
class LayerOverride:
    """Widths of one pruned layer; absent fields fall back to the config."""

    layer_index: int
    d_ff_actual: int
    n_heads_actual: int
    v_dims: tuple[int, ...]  # per surviving head, each <= head_dim


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    norm_eps: float = 1e-5
    rope_base: float = 10000.0
    layers: tuple[LayerOverride, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "head_dim", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.norm_eps <= 0 or self.rope_base <= 0:
            raise ValidationError("norm_eps and rope_base must be positive")
        if self.n_heads * self.head_dim != self.d_model:
            raise ValidationError(
                f"n_heads ({self.n_heads}) x head_dim ({self.head_dim}) must equal "
                f"d_model ({self.d_model}); narrower layers belong in per-layer overrides"
            )
        seen = set()
        for ov in self.layers:
            if ov.layer_index in seen:
                raise ValidationError(f"duplicate layer override for layer {ov.layer_index}")
            seen.add(ov.layer_index)
            if not 0 <= ov.layer_index < self.n_layers:
                raise ValidationError(f"layer override index {ov.layer_index} out of range")
            if ov.d_ff_actual < 0 or ov.n_heads_actual < 0:
                raise ValidationError("layer override widths must be >= 0")
            if len(ov.v_dims) != ov.n_heads_actual:
                raise ValidationError(
                    f"layer {ov.layer_index}: v_dims length {len(ov.v_dims)} != n_heads_actual {ov.n_heads_actual}"
                )
            if any(v < 0 or v > self.head_dim for v in ov.v_dims):
                raise ValidationError(f"layer {ov.layer_index}: per-head v_dim outside [0, head_dim]")

    def _override(self, layer: int) -> LayerOverride | None:
        for ov in self.layers:
            if ov.layer_index == layer:
                return ov
        return None

    def d_ff_at(self, layer: int) -> int:
        ov = self._override(layer)
        return ov.d_ff_actual if ov is not None else self.d_ff

    def n_heads_at(self, layer: int) -> int:
        ov = self._override(layer)
        return ov.n_heads_actual if ov is not None else self.n_heads

    def v_dims_at(self, layer: int) -> tuple[int, ...]:
        ov = self._override(layer)
        return ov.v_dims if ov is not None else (self.head_dim,) * self.n_heads

    def v_width_at(self, layer: int) -> int:
        return sum(self.v_dims_at(layer))

    def qk_width_at(self, layer: int) -> int:
        return self.n_heads_at(layer) * self.head_dim

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Every required tensor name with its exact shape, canonical order."""
        shapes: dict[str, tuple[int, ...]] = {
            "embed": (self.vocab_size, self.d_model),
            "final_norm": (self.d_model,),
            "unembed": (self.vocab_size, self.d_model),
        }
        for l in range(self.n_layers):
            qk = self.qk_width_at(l)
            vw = self.v_width_at(l)
            dff = self.d_ff_at(l)
            shapes[f"layer.{l}.attn.wq"] = (qk, self.d_model)
            shapes[f"layer.{l}.attn.wk"] = (qk, self.d_model)
            shapes[f"layer.{l}.attn.wv"] = (vw, self.d_model)
            shapes[f"layer.{l}.attn.wo"] = (self.d_model, vw)
            shapes[f"layer.{l}.ffn.up"] = (dff, self.d_model)
            shapes[f"layer.{l}.ffn.gate"] = (dff, self.d_model)
            shapes[f"layer.{l}.ffn.down"] = (self.d_model, dff)
            shapes[f"layer.{l}.norm1"] = (self.d_model,)
            shapes[f"layer.{l}.norm2"] = (self.d_model,)
        return shapes

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.tensor_shapes().values())

    def with_meta(self, **entries) -> "ModelConfig":
        merged = dict(self.meta)
        merged.update(entries)
        return replace(self, meta=merged)


@dataclass
class ForwardTrace:
    """Per-sublayer activations captured during one forward pass.

    attn_out / ffn_out hold the residual stream AFTER each sublayer's
    addition; resid_pre_attn / resid_pre_ffn hold it before. ffn_acts is
    the gated intermediate activation; head_values holds, per layer and
    head, the attention-weighted value rows [seq, v_dim].
    """

    resid_pre_attn: list[np.ndarray]
    attn_out: list[np.ndarray]
    resid_pre_ffn: list[np.ndarray]
    ffn_out: list[np.ndarray]
    ffn_acts: list[np.ndarray]
    head_values: list[list[np.ndarray]]
    logits: np.ndarray


def validate_weights(config: ModelConfig, weights: WeightStore) -> None:
    """Check the weight map against the config: names, shapes, dtype, finiteness."""
    expected = config.tensor_shapes()
    for name, shape in expected.items():
        if name not in weights:
            raise ValidationError(f"missing tensor: {name}")
        t = weights[name]
        if t.dtype != np.float32:
            raise ValidationError(f"tensor {name} has dtype {t.dtype}, expected float32")
        if tuple(t.shape) != shape:
            raise ValidationError(f"tensor {name} has shape {tuple(t.shape)}, expected {shape}")
        if not np.isfinite(t).all():
            raise ValidationError(f"non-finite values in tensor {name}")
    extra = set(weights) - set(expected)
    if extra:
        raise ValidationError(f"unknown tensor name(s): {sorted(extra)}")


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    """RMS-normalize rows of x (float64 mean of squares), scale by weight."""
    ms = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    scale = 1.0 / np.sqrt(ms + eps)
    return (x * scale * weight).astype(np.float32)


@lru_cache(maxsize=8)
def _rope_tables(seq_len: int, head_dim: int, rope_base: float) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = rope_base ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def apply_rope(x: np.ndarray, head_dim: int, rope_base: float) -> np.ndarray:
    """Rotate adjacent dim pairs of x [seq, head_dim] by position-dependent angles.

    Odd trailing dim (odd head_dim) passes through unrotated.
    """
    seq = x.shape[0]
    half = head_dim // 2
    if half == 0:
        return x
    cos, sin = _rope_tables(seq, head_dim, rope_base)
    even = x[:, 0 : 2 * half : 2]
    odd = x[:, 1 : 2 * half : 2]
    out = x.copy()
    out[:, 0 : 2 * half : 2] = even * cos - odd * sin
    out[:, 1 : 2 * half : 2] = even * sin + odd * cos
    return out


def _softmax_rows_f64(scores: np.ndarray) -> np.ndarray:
    s = scores.astype(np.float64)
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _causal_mask(seq: int) -> np.ndarray:
    return np.triu(np.full((seq, seq), -np.inf, dtype=np.float32), k=1)


def attention_sublayer(
    config: ModelConfig,
    weights: WeightStore,
    layer: int,
    x: np.ndarray,
    collect_head_values: bool = False,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Attention sublayer output (pre-residual delta) for residual input x."""
    z = rmsnorm(x, weights[f"layer.{layer}.norm1"], config.norm_eps)
    n_heads = config.n_heads_at(layer)
    v_dims = config.v_dims_at(layer)
    seq = x.shape[0]
    delta = np.zeros((seq, config.d_model), dtype=np.float32)
    head_values: list[np.ndarray] = []
    if n_heads == 0:
        return delta, head_values
    wq = weights[f"layer.{layer}.attn.wq"]
    wk = weights[f"layer.{layer}.attn.wk"]
    wv = weights[f"layer.{layer}.attn.wv"]
    wo = weights[f"layer.{layer}.attn.wo"]
    q_all = z @ wq.T
    k_all = z @ wk.T
    v_all = z @ wv.T
    mask = _causal_mask(seq)
    scale = 1.0 / math.sqrt(config.head_dim)
    v_off = 0
    for h in range(n_heads):
        sl = slice(h * config.head_dim, (h + 1) * config.head_dim)
        q = apply_rope(q_all[:, sl], config.head_dim, config.rope_base)
        k = apply_rope(k_all[:, sl], config.head_dim, config.rope_base)
        scores = (q @ k.T) * scale + mask
        attn = _softmax_rows_f64(scores).astype(np.float32)
        v_dim = v_dims[h]
        values = attn @ v_all[:, v_off : v_off + v_dim]
        delta += values @ wo[:, v_off : v_off + v_dim].T
        if collect_head_values:
            head_values.append(values)
        v_off += v_dim
    return delta, head_values


def ffn_sublayer(
    config: ModelConfig, weights: WeightStore, layer: int, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """FFN sublayer delta and intermediate activations for residual input x."""
    z = rmsnorm(x, weights[f"layer.{layer}.norm2"], config.norm_eps)
    up = weights[f"layer.{layer}.ffn.up"]
    gate = weights[f"layer.{layer}.ffn.gate"]
    down = weights[f"layer.{layer}.ffn.down"]
    g = z @ gate.T
    acts = (g / (1.0 + np.exp(-g))) * (z @ up.T)
    return acts @ down.T, acts


def forward(
    config: ModelConfig,
    weights: WeightStore,
    token_ids,
    trace: bool = False,
) -> tuple[np.ndarray, ForwardTrace | None]:
    """Run the decoder over token_ids; returns logits [seq, vocab].

    With trace=True also returns the full ForwardTrace (needed by the
    relevance scorer's single-pass parallel detection).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValidationError("empty or non-1d token sequence")
    if ids.size > config.max_seq_len:
        raise ValidationError(f"sequence length {ids.size} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValidationError("token id out of range")

    x = weights["embed"][ids].copy()
    tr = (
        ForwardTrace([], [], [], [], [], [], np.empty(0))
        if trace
        else None
    )
    for layer in range(config.n_layers):
        if tr is not None:
            tr.resid_pre_attn.append(x)
        delta, head_vals = attention_sublayer(config, weights, layer, x, collect_head_values=trace)
        x = x + delta
        if tr is not None:
            tr.attn_out.append(x)
            tr.head_values.append(head_vals)
            tr.resid_pre_ffn.append(x)
        delta, acts = ffn_sublayer(config, weights, layer, x)
        x = x + delta
        if tr is not None:
            tr.ffn_out.append(x)
            tr.ffn_acts.append(acts)
    z = rmsnorm(x, weights["final_norm"], config.norm_eps)
    logits = z @ weights["unembed"].T
    if tr is not None:
        tr.logits = logits
    return logits, tr


def logprobs(config: ModelConfig, weights: WeightStore, token_ids) -> np.ndarray:
    """Next-token log-probabilities per position: float64 log-softmax of logits."""
    logits, _ = forward(config, weights, token_ids)
    s = logits.astype(np.float64)
    s -= s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))
