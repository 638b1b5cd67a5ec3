"""Capability-retention and speed measurements for dense vs pruned bundles.

Desk-scale metric set: perplexity (likelihood), multiple-choice accuracy
(option with the highest mean per-token logprob), Rouge-L F1 over greedy
completions, and wall-clock tokens/sec with an analytic FLOP count.
Retention is pruned/dense per dataset, inverted for perplexity.
"""

from __future__ import annotations

import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .bundle import Vocab
from .corpus import detokenize, tokenize
from .errors import ValidationError
from .model import ModelConfig, WeightStore, forward, logprobs


def perplexity(
    config: ModelConfig, weights: WeightStore, docs: list[list[int]], threads: int = 1
) -> float:
    """exp(mean negative log-likelihood per predicted token), float64.

    Positions 1..n-1 of each doc are predicted from their prefix; docs
    shorter than 2 tokens contribute nothing. Documents may be evaluated
    concurrently; the result does not depend on thread count or order.
    """
    if not docs:
        raise ValidationError("empty input")

    def doc_nll(ids) -> tuple[float, int]:
        if len(ids) < 2:
            return 0.0, 0
        lp = logprobs(config, weights, ids)
        targets = np.asarray(ids[1:], dtype=np.int64)
        return -float(lp[np.arange(len(targets)), targets].sum()), len(targets)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(doc_nll, docs))
    else:
        results = [doc_nll(ids) for ids in docs]
    total_tokens = sum(count for _, count in results)
    if total_tokens == 0:
        raise ValidationError("no predictable tokens (all docs shorter than 2 tokens)")
    # fsum is exact, so document order cannot change the result
    return math.exp(math.fsum(nll for nll, _ in results) / total_tokens)


def mcq_accuracy(
    config: ModelConfig, weights: WeightStore, vocab: Vocab, items: list[dict]
) -> float:
    """Fraction of items whose gold option scores the highest mean logprob.

    Ties resolve to the lowest option index.
    """
    if not items:
        raise ValidationError("no MCQ items")
    correct = 0
    for item in items:
        prompt_ids = tokenize(vocab, item["prompt"])
        if not prompt_ids:
            raise ValidationError(f"MCQ item {item.get('id', '?')}: empty prompt")
        options = item["options"]
        if not options:
            raise ValidationError(f"MCQ item {item.get('id', '?')}: empty options")
        best_idx, best_score = 0, -math.inf
        for oi, option in enumerate(options):
            opt_ids = tokenize(vocab, option)
            if not opt_ids:
                raise ValidationError(f"MCQ item {item.get('id', '?')}: option {oi} tokenizes empty")
            ids = (prompt_ids + opt_ids)[: config.max_seq_len]
            if len(ids) <= len(prompt_ids):
                raise ValidationError(f"MCQ item {item.get('id', '?')}: prompt fills the context")
            lp = logprobs(config, weights, ids)
            positions = np.arange(len(prompt_ids), len(ids))
            score = float(np.mean(lp[positions - 1, np.asarray(ids)[positions]]))
            if score > best_score:
                best_idx, best_score = oi, score
        if best_idx == int(item["gold"]):
            correct += 1
    return correct / len(items)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based Rouge-L F1 over lowercased whitespace tokens."""
    ref = reference.lower().split()
    if not ref:
        raise ValidationError("empty reference")
    cand = candidate.lower().split()
    if not cand:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


def greedy_decode(
    config: ModelConfig, weights: WeightStore, prompt_ids: list[int], max_new_tokens: int
) -> list[int]:
    """Argmax decoding by full recompute each step (ties: lowest id)."""
    if not prompt_ids:
        raise ValidationError("empty prompt")
    ids = list(prompt_ids)
    for _ in range(max_new_tokens):
        if len(ids) >= config.max_seq_len:
            break
        logits, _ = forward(config, weights, ids)
        ids.append(int(np.argmax(logits[-1])))
    return ids


# --- speed -----------------------------------------------------------------


def flop_count(config: ModelConfig, seq_len: int) -> int:
    """Analytic forward FLOPs for one sequence (matmuls + elementwise)."""
    s = seq_len
    d = config.d_model
    pairs = s * (s + 1) // 2  # causal attention positions
    total = 0
    for l in range(config.n_layers):
        qkw = config.qk_width_at(l)
        vw = config.v_width_at(l)
        dff = config.d_ff_at(l)
        total += 2 * s * d * qkw * 2          # wq, wk
        total += 2 * s * d * vw               # wv
        total += 2 * s * vw * d               # wo
        total += 6 * s * qkw * 2              # rope rotations
        total += 2 * pairs * config.head_dim * config.n_heads_at(l)  # q.k scores
        total += 5 * pairs * config.n_heads_at(l)                    # softmax
        total += 2 * pairs * vw               # attention-weighted values
        total += 2 * s * d * dff * 2          # up, gate
        total += 4 * s * dff                  # silu + gating
        total += 2 * s * dff * d              # down
        total += 2 * 3 * s * d                # two rmsnorms
        total += 2 * 2 * s * d                # residual adds
    total += 3 * s * d                        # final norm
    total += 2 * s * d * config.vocab_size    # unembed
    return total


def _tokens_per_sec(config: ModelConfig, weights: WeightStore, docs: list[list[int]],
                    passes: int = 1) -> float:
    start = time.perf_counter()
    total = 0
    for _ in range(passes):
        for ids in docs:
            forward(config, weights, ids)
            total += len(ids)
    return total / (time.perf_counter() - start)


def _calibrate_passes(config, weights, docs, target_seconds: float = 1.0) -> int:
    elapsed = 1e-9
    passes = 1
    while True:
        start = time.perf_counter()
        _tokens_per_sec(config, weights, docs, passes)
        elapsed = time.perf_counter() - start
        if elapsed >= target_seconds / 4 or passes >= 256:
            break
        passes *= 2
    return max(1, passes * int(math.ceil(target_seconds / elapsed / 4)) * 4)


def bench_speed(
    config_dense: ModelConfig,
    weights_dense: WeightStore,
    config_pruned: ModelConfig,
    weights_pruned: WeightStore,
    docs: list[list[int]],
    repetitions: int = 3,
) -> dict:
    """Median single-threaded tokens/sec over identical token streams.

    Each timed pass loops the document set long enough (~1 s) that
    scheduler noise averages out; dense/pruned passes are interleaved.
    """
    if repetitions < 3:
        raise ValidationError("repetitions must be >= 3")
    if not docs:
        raise ValidationError("no timing documents")
    dense_runs, pruned_runs = [], []
    with threadpool_limits(limits=1):
        passes = _calibrate_passes(config_dense, weights_dense, docs)  # also warms up
        _tokens_per_sec(config_pruned, weights_pruned, docs, 1)
        for _ in range(repetitions):
            dense_runs.append(_tokens_per_sec(config_dense, weights_dense, docs, passes))
            pruned_runs.append(_tokens_per_sec(config_pruned, weights_pruned, docs, passes))
    tps_dense = statistics.median(dense_runs)
    tps_pruned = statistics.median(pruned_runs)
    flops_dense = sum(flop_count(config_dense, len(ids)) for ids in docs)
    flops_pruned = sum(flop_count(config_pruned, len(ids)) for ids in docs)
    return {
        "tokens_per_sec_dense": tps_dense,
        "tokens_per_sec_pruned": tps_pruned,
        "speedup": tps_pruned / tps_dense,
        "flops_dense": flops_dense,
        "flops_pruned": flops_pruned,
        "flop_ratio": flops_dense / flops_pruned,
        "repetitions": repetitions,
    }


# --- report ----------------------------------------------------------------


@dataclass
class EvalReport:
    datasets: dict
    parameters: dict
    timing: dict | None = None
    plan: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


def _retention(dense: float, pruned: float, invert: bool) -> float | None:
    if dense == pruned:
        return 1.0
    num, den = (dense, pruned) if invert else (pruned, dense)
    if den == 0:
        return None
    return num / den


def expert_report(
    dense: tuple[ModelConfig, WeightStore],
    pruned: tuple[ModelConfig, WeightStore],
    vocab: Vocab,
    expert_docs: list[list[int]],
    general_docs: list[list[int]],
    mcq_sets: dict[str, list[dict]] | None = None,
    rouge_sets: dict[str, list[dict]] | None = None,
    *,
    plan_ref: str | None = None,
    timing_docs: list[list[int]] | None = None,
    repetitions: int = 3,
    max_new_tokens: int = 32,
    threads: int = 1,
) -> EvalReport:
    """Dense-vs-pruned metrics with per-dataset retention fractions."""
    dc, dw = dense
    pc, pw = pruned
    datasets: dict[str, dict] = {}

    def add(name: str, metric: str, dv: float, pv: float, invert: bool = False):
        datasets[name] = {
            "metric": metric,
            "dense": dv,
            "pruned": pv,
            "retention": _retention(dv, pv, invert),
        }

    add("expert", "perplexity", perplexity(dc, dw, expert_docs, threads),
        perplexity(pc, pw, expert_docs, threads), invert=True)
    add("general", "perplexity", perplexity(dc, dw, general_docs, threads),
        perplexity(pc, pw, general_docs, threads), invert=True)
    for name, items in (mcq_sets or {}).items():
        add(f"mcq:{name}", "accuracy", mcq_accuracy(dc, dw, vocab, items), mcq_accuracy(pc, pw, vocab, items))
    for name, items in (rouge_sets or {}).items():
        if not items:
            raise ValidationError(f"rouge set {name!r} is empty")
        scores = {"dense": [], "pruned": []}
        for item in items:
            prompt_ids = tokenize(vocab, item["prompt"])
            for key, (cfg, wts) in (("dense", (dc, dw)), ("pruned", (pc, pw))):
                out = greedy_decode(cfg, wts, prompt_ids, max_new_tokens)
                text = detokenize(vocab, out[len(prompt_ids) :])
                scores[key].append(rouge_l(text, item["reference"]))
        add(
            f"rouge:{name}",
            "rouge_l",
            float(np.mean(scores["dense"])),
            float(np.mean(scores["pruned"])),
        )

    timing = None
    if timing_docs:
        timing = bench_speed(dc, dw, pc, pw, timing_docs, repetitions)
    d_params, p_params = dc.parameter_count(), pc.parameter_count()
    return EvalReport(
        datasets=datasets,
        parameters={
            "dense": d_params,
            "pruned": p_params,
            "ratio_removed": (d_params - p_params) / d_params,
        },
        timing=timing,
        plan=plan_ref,
    )
