"""Neuron relevance scoring and per-dimension irrelevant-neuron sets.

A neuron's impact on a document is the RMS over token positions of the
L2 norm of its additive contribution to its own sublayer's output. All
default-pool neuron classes contribute additively, so one traced
forward pass per document yields every neuron's impact at once (the
parallel detection fast path):

    FFN channel i:    impact = rms_t(a_i(t)) * ||down[:, i]||
    value channel j:  impact = rms_t(s_j(t)) * ||wo[:, j]||
    attention head h: impact = rms_t(|| wo_h @ s_h(t) ||)
    layer unit l:     impact = rms_t(|| block_out(t) - block_in(t) ||)

where a is the gated FFN activation and s the attention-weighted value
rows. score_document_oracle is the independent check: it literally
zeroes the neuron's coupled weight slices and recomputes the owning
sublayer in float64.

A neuron is irrelevant to a dimension corpus iff, for EVERY document,
its impact ranks in the lowest tau percent of the default pool (FFN +
value channels, pooled globally across layers). Ties at the boundary
break by canonical neuron order.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import Vocab
from .corpus import DimensionCorpus, tokenize
from .errors import ValidationError
from .model import ModelConfig, WeightStore, _causal_mask, apply_rope, forward
from .neurons import POOL_CLASSES, NeuronClass, NeuronId, NeuronUniverse, coupled_slices


@dataclass(frozen=True)
class ScoreConfig:
    """Scoring knobs: tau is the per-document irrelevance percentile."""

    tau: float = 50.0
    max_tokens_per_doc: int = 512
    # token aggregation is fixed to root-mean-square over positions

    def __post_init__(self):
        if not 0.0 < self.tau <= 100.0:
            raise ValidationError(f"tau must be in (0, 100], got {self.tau}")
        if self.max_tokens_per_doc < 1:
            raise ValidationError("max_tokens_per_doc must be >= 1")


@dataclass
class ImpactMatrix:
    """Impact scores, neuron axis (canonical universe order) x document axis."""

    values: np.ndarray  # float32 [n_neurons, n_docs]
    universe: NeuronUniverse
    doc_ids: tuple[str, ...]
    dimension: str
    fingerprint: str

    def __post_init__(self):
        if self.values.shape != (len(self.universe), len(self.doc_ids)):
            raise ValidationError(
                f"impact matrix shape {self.values.shape} does not match "
                f"universe {len(self.universe)} x docs {len(self.doc_ids)}"
            )
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValidationError("impact scores must be finite and nonnegative")


@dataclass(frozen=True)
class IrrelevantSet:
    dimension: str
    neurons: frozenset[NeuronId]
    provenance: dict = field(default_factory=dict)

    def sorted_ids(self) -> list[NeuronId]:
        return sorted(self.neurons)


def _rms_over_tokens(squares: np.ndarray) -> np.ndarray:
    """sqrt of the token mean; input is already squared, any shape [seq, ...]."""
    return np.sqrt(np.mean(squares, axis=0, dtype=np.float64))


def score_document(
    config: ModelConfig, weights: WeightStore, token_ids, universe: NeuronUniverse
) -> np.ndarray:
    """Impact of every neuron in the universe on one document (fast path)."""
    if len(token_ids) == 0:
        raise ValidationError("empty document")
    _, tr = forward(config, weights, token_ids, trace=True)
    assert tr is not None
    out = np.zeros(len(universe), dtype=np.float32)
    pos = 0
    for layer in range(config.n_layers):
        d_ff = config.d_ff_at(layer)
        if d_ff:
            col_norms = np.linalg.norm(
                weights[f"layer.{layer}.ffn.down"].astype(np.float64), axis=0
            )
            act_rms = _rms_over_tokens(np.square(tr.ffn_acts[layer], dtype=np.float64))
            out[pos : pos + d_ff] = (act_rms * col_norms).astype(np.float32)
        pos += d_ff

        wo = weights[f"layer.{layer}.attn.wo"]
        v_dims = config.v_dims_at(layer)
        v_off = 0
        for h in range(config.n_heads_at(layer)):
            vd = v_dims[h]
            s = tr.head_values[layer][h]
            if vd:
                wo_cols = np.linalg.norm(
                    wo[:, v_off : v_off + vd].astype(np.float64), axis=0
                )
                s_rms = _rms_over_tokens(np.square(s, dtype=np.float64))
                out[pos : pos + vd] = (s_rms * wo_cols).astype(np.float32)
            pos += vd
            v_off += vd

        v_off = 0
        for h in range(config.n_heads_at(layer)):
            vd = v_dims[h]
            contrib = tr.head_values[layer][h] @ wo[:, v_off : v_off + vd].T
            sqnorm = np.sum(np.square(contrib, dtype=np.float64), axis=1)
            out[pos] = np.float32(math.sqrt(float(np.mean(sqnorm))))
            pos += 1
            v_off += vd

        block_delta = tr.ffn_out[layer] - tr.resid_pre_attn[layer]
        sqnorm = np.sum(np.square(block_delta, dtype=np.float64), axis=1)
        out[pos] = np.float32(math.sqrt(float(np.mean(sqnorm))))
        pos += 1
    assert pos == len(universe)
    return out


def _rmsnorm_f64(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    x = x.astype(np.float64)
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * weight.astype(np.float64)


def _ffn_f64(config, weights, layer, x, up, gate, down):
    z = _rmsnorm_f64(x, weights[f"layer.{layer}.norm2"], config.norm_eps)
    g = z @ gate.T
    return ((g / (1.0 + np.exp(-g))) * (z @ up.T)) @ down.T


def _attn_f64(config, weights, layer, x, wq, wk, wv, wo):
    z = _rmsnorm_f64(x, weights[f"layer.{layer}.norm1"], config.norm_eps)
    seq = x.shape[0]
    out = np.zeros((seq, config.d_model), dtype=np.float64)
    if config.n_heads_at(layer) == 0:
        return out
    q_all, k_all, v_all = z @ wq.T, z @ wk.T, z @ wv.T
    mask = _causal_mask(seq).astype(np.float64)
    v_dims = config.v_dims_at(layer)
    v_off = 0
    for h in range(config.n_heads_at(layer)):
        sl = slice(h * config.head_dim, (h + 1) * config.head_dim)
        q = apply_rope(q_all[:, sl], config.head_dim, config.rope_base)
        k = apply_rope(k_all[:, sl], config.head_dim, config.rope_base)
        scores = (q @ k.T) / math.sqrt(config.head_dim) + mask
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        vd = v_dims[h]
        out += (attn @ v_all[:, v_off : v_off + vd]) @ wo[:, v_off : v_off + vd].T
        v_off += vd
    return out


def score_document_oracle(
    config: ModelConfig, weights: WeightStore, token_ids, neuron: NeuronId
) -> float:
    """Literal ablation: zero the neuron's slices, recompute its sublayer.

    Float64 throughout; used in tests and small runs only.
    """
    if len(token_ids) == 0:
        raise ValidationError("empty document")
    _, tr = forward(config, weights, token_ids, trace=True)
    assert tr is not None
    l = neuron.layer

    if neuron.cls is NeuronClass.FFN_CHANNEL:
        x = tr.resid_pre_ffn[l]
        up = weights[f"layer.{l}.ffn.up"].astype(np.float64)
        gate = weights[f"layer.{l}.ffn.gate"].astype(np.float64)
        down = weights[f"layer.{l}.ffn.down"].astype(np.float64)
        full = _ffn_f64(config, weights, l, x, up, gate, down)
        up, gate, down = up.copy(), gate.copy(), down.copy()
        up[neuron.index, :] = 0.0
        gate[neuron.index, :] = 0.0
        down[:, neuron.index] = 0.0
        ablated = _ffn_f64(config, weights, l, x, up, gate, down)
    elif neuron.cls in (NeuronClass.ATTN_VALUE_CHANNEL, NeuronClass.ATTN_HEAD):
        x = tr.resid_pre_attn[l]
        wq = weights[f"layer.{l}.attn.wq"].astype(np.float64)
        wk = weights[f"layer.{l}.attn.wk"].astype(np.float64)
        wv = weights[f"layer.{l}.attn.wv"].astype(np.float64)
        wo = weights[f"layer.{l}.attn.wo"].astype(np.float64)
        full = _attn_f64(config, weights, l, x, wq, wk, wv, wo)
        wq, wk, wv, wo = wq.copy(), wk.copy(), wv.copy(), wo.copy()
        for sl in coupled_slices(neuron, config):
            arr = {"attn.wq": wq, "attn.wk": wk, "attn.wv": wv, "attn.wo": wo}[
                sl.tensor.split(".", 2)[2]
            ]
            if sl.axis == 0:
                arr[sl.index, :] = 0.0
            else:
                arr[:, sl.index] = 0.0
        ablated = _attn_f64(config, weights, l, x, wq, wk, wv, wo)
    elif neuron.cls is NeuronClass.LAYER_UNIT:
        x = tr.resid_pre_attn[l]
        wq = weights[f"layer.{l}.attn.wq"].astype(np.float64)
        wk = weights[f"layer.{l}.attn.wk"].astype(np.float64)
        wv = weights[f"layer.{l}.attn.wv"].astype(np.float64)
        wo = weights[f"layer.{l}.attn.wo"].astype(np.float64)
        mid = x.astype(np.float64) + _attn_f64(config, weights, l, x, wq, wk, wv, wo)
        up = weights[f"layer.{l}.ffn.up"].astype(np.float64)
        gate = weights[f"layer.{l}.ffn.gate"].astype(np.float64)
        down = weights[f"layer.{l}.ffn.down"].astype(np.float64)
        full = mid + _ffn_f64(config, weights, l, mid, up, gate, down)
        ablated = x.astype(np.float64)  # removed layer passes the residual through
    else:  # pragma: no cover
        raise ValidationError(f"unknown neuron class {neuron.cls}")

    diff = full - ablated
    sqnorm = np.sum(np.square(diff), axis=1)
    return float(math.sqrt(float(np.mean(sqnorm))))


def score_corpus(
    config: ModelConfig,
    weights: WeightStore,
    vocab: Vocab,
    corpus: DimensionCorpus,
    universe: NeuronUniverse,
    score_config: ScoreConfig,
    fingerprint: str = "",
    threads: int = 1,
) -> ImpactMatrix:
    """Score every document of a corpus; columns follow corpus order.

    Documents are scored independently (safe to run concurrently); the
    assembled matrix is bit-identical regardless of thread count.
    """
    limit = min(score_config.max_tokens_per_doc, config.max_seq_len)
    token_lists = []
    for doc in corpus.documents:
        ids = tokenize(vocab, doc.text)[:limit]
        if not ids:
            raise ValidationError(f"document {doc.id!r}: empty after tokenization")
        token_lists.append(ids)

    def one(arg):
        doc_id, ids = arg
        try:
            return score_document(config, weights, ids, universe)
        except ValidationError as exc:
            raise ValidationError(f"document {doc_id!r}: {exc}") from exc

    jobs = list(zip((d.id for d in corpus.documents), token_lists))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            columns = list(pool.map(one, jobs))
    else:
        columns = [one(job) for job in jobs]
    values = np.stack(columns, axis=1)
    return ImpactMatrix(
        values=values,
        universe=universe,
        doc_ids=tuple(d.id for d in corpus.documents),
        dimension=corpus.label,
        fingerprint=fingerprint,
    )


def pool_indices(universe: NeuronUniverse) -> np.ndarray:
    """Universe indices of the default percentile pool (FFN + value channels)."""
    return np.array(
        [i for i, n in enumerate(universe.neurons) if n.cls in POOL_CLASSES], dtype=np.int64
    )


def rank_cutoff(tau: float, pool_size: int) -> int:
    """Number of pool neurons counted as 'lowest tau percent' of a document."""
    if not 0.0 < tau <= 100.0:
        raise ValidationError(f"tau must be in (0, 100], got {tau}")
    return int(math.floor(pool_size * tau / 100.0 + 1e-9))


def pool_ranks(impacts: ImpactMatrix) -> np.ndarray:
    """Per-document impact ranks over the pool, ties broken by canonical order.

    Returns int32 [pool_size, n_docs]; rank 0 is the lowest impact.
    """
    idx = pool_indices(impacts.universe)
    scores = impacts.values[idx, :]
    ranks = np.empty_like(scores, dtype=np.int32)
    for d in range(scores.shape[1]):
        order = np.argsort(scores[:, d], kind="stable")
        ranks[order, d] = np.arange(len(idx), dtype=np.int32)
    return ranks


def irrelevant_set(impacts: ImpactMatrix, score_config: ScoreConfig) -> IrrelevantSet:
    """Pool neurons ranking in the lowest tau percent for every document."""
    if impacts.values.shape[1] == 0:
        raise ValidationError("empty corpus")
    idx = pool_indices(impacts.universe)
    k = rank_cutoff(score_config.tau, len(idx))
    mask = (pool_ranks(impacts) < k).all(axis=1)
    members = frozenset(impacts.universe.neurons[i] for i in idx[mask])
    return IrrelevantSet(
        dimension=impacts.dimension,
        neurons=members,
        provenance={
            "corpus": impacts.dimension,
            "tau": score_config.tau,
            "documents": len(impacts.doc_ids),
            "fingerprint": impacts.fingerprint,
        },
    )


# --- persistence ----------------------------------------------------------


def save_impacts(impacts: ImpactMatrix, path) -> None:
    """impacts.bin: u64 n_neurons, u64 n_docs, f32 column-major, JSON footer."""
    n, d = impacts.values.shape
    footer = json.dumps(
        {
            "doc_ids": list(impacts.doc_ids),
            "dimension": impacts.dimension,
            "fingerprint": impacts.fingerprint,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", n, d))
        fh.write(np.asfortranarray(impacts.values).tobytes(order="F"))
        fh.write(footer)


def load_impacts(path, universe: NeuronUniverse) -> ImpactMatrix:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValidationError("impacts file too short")
    n, d = struct.unpack("<QQ", data[:16])
    payload_end = 16 + 4 * n * d
    if len(data) < payload_end:
        raise ValidationError("impacts file truncated")
    values = np.frombuffer(data[16:payload_end], dtype="<f4").reshape((n, d), order="F")
    meta = json.loads(data[payload_end:].decode("utf-8"))
    return ImpactMatrix(
        values=np.ascontiguousarray(values),
        universe=universe,
        doc_ids=tuple(meta["doc_ids"]),
        dimension=meta["dimension"],
        fingerprint=meta.get("fingerprint", ""),
    )


def save_irrelevant_set(iset: IrrelevantSet, path) -> None:
    """Newline-delimited canonical ids with a '# provenance:' header line."""
    lines = ["# provenance: " + json.dumps(iset.provenance, sort_keys=True)]
    lines += [n.canonical() for n in iset.sorted_ids()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_irrelevant_set(path, dimension: str = "") -> IrrelevantSet:
    provenance: dict = {}
    neurons: set[NeuronId] = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("# provenance:"):
            provenance = json.loads(line[len("# provenance:") :])
            continue
        if line.startswith("#"):
            continue
        neurons.add(NeuronId.parse(line))
    return IrrelevantSet(
        dimension=dimension or provenance.get("corpus", ""),
        neurons=frozenset(neurons),
        provenance=provenance,
    )
