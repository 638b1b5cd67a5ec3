"""Plan construction and application: intersect per-dimension irrelevant
sets, calibrate the percentile to a target parameter ratio, and
physically remove the chosen rows/columns.

The per-document percentile tau does not map 1:1 onto a final parameter
ratio (the intersection across documents and dimensions shrinks the
set), so tau is found by search. The search runs over the discrete
per-document rank cutoff k = floor(pool * tau / 100): the removed
fraction is monotone nondecreasing in k, so after two binary searches
(bounding sigma and the sigma + 0.005 cap) the optimum is either the
last cutoff at or below sigma or the first one above it. The closer of
the two wins, ties to the smaller ratio; the reported tau is
100 * k / pool.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bundle import Vocab, fingerprint
from .corpus import DimensionCorpus, tokenize
from .errors import CalibrationError, FingerprintMismatch, ValidationError
from .model import LayerOverride, ModelConfig, WeightStore, forward
from .neurons import (
    NeuronClass,
    NeuronId,
    NeuronUniverse,
    coupled_slices,
    enumerate_neurons,
)
from .relevance import (
    ImpactMatrix,
    IrrelevantSet,
    ScoreConfig,
    pool_indices,
    pool_ranks,
    rank_cutoff,
    score_corpus,
)

log = logging.getLogger("cusprune")

RATIO_TOLERANCE = 0.005
_EPS = 1e-12


@dataclass(frozen=True)
class PlanPhase:
    kind: str  # "layer" | "neuron"
    ids: tuple[NeuronId, ...]


@dataclass(frozen=True)
class PrunePlan:
    fingerprint: str
    sigma: float
    tau: float
    phases: tuple[PlanPhase, ...]
    achieved_ratio: float
    removed_params: int
    total_params: int
    provenance: dict = field(default_factory=dict)

    def neuron_ids(self) -> list[NeuronId]:
        out: list[NeuronId] = []
        for phase in self.phases:
            out.extend(phase.ids)
        return out


@dataclass(frozen=True)
class LayerScore:
    layer: int
    importance: float  # 1 - mean cosine(block input, block output), in [0, 2]


def intersect_dimensions(sets: list[IrrelevantSet]) -> set[NeuronId]:
    """Exact intersection of 1-3 per-dimension irrelevant sets."""
    if not sets:
        raise ValidationError("at least one irrelevant set required")
    if len(sets) > 3:
        raise ValidationError("at most three dimension sets supported")
    fps = {s.provenance.get("fingerprint", "") for s in sets}
    if len(fps) > 1:
        raise FingerprintMismatch(f"irrelevant sets target different models: {sorted(fps)}")
    out = set(sets[0].neurons)
    for s in sets[1:]:
        out &= s.neurons
    return out


def _combined_mask(rank_mats: list[np.ndarray], k: int) -> np.ndarray:
    mask = (rank_mats[0] < k).all(axis=1)
    for ranks in rank_mats[1:]:
        mask &= (ranks < k).all(axis=1)
    return mask


def _largest_feasible_k(removed_fn, n: int, bound: float) -> int | None:
    """Largest k in [0, n] with removed_fn(k) <= bound; None if k=0 fails."""
    if removed_fn(0) > bound:
        return None
    lo, hi = 0, n
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if removed_fn(mid) <= bound:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _pick_cutoff(
    rank_mats: list[np.ndarray],
    pool_weights: np.ndarray,
    total_params: int,
    base_removed: int,
    sigma: float,
    force_closest: bool,
) -> tuple[int, float]:
    """Choose the rank cutoff whose total removed ratio best matches sigma."""
    n = len(pool_weights)
    cache: dict[int, float] = {}

    def ratio(k: int) -> float:
        if k not in cache:
            removed = base_removed + int(pool_weights[_combined_mask(rank_mats, k)].sum())
            cache[k] = removed / total_params
        return cache[k]

    # ratio is monotone in k, so the best feasible cutoff is either the
    # largest k still below sigma or the smallest k above it (capped)
    k_cap = _largest_feasible_k(ratio, n, sigma + RATIO_TOLERANCE + _EPS)
    k_sig = _largest_feasible_k(ratio, n, sigma + _EPS)
    candidates = []
    if k_cap is not None:
        if k_sig is not None:
            candidates.append(k_sig)
            if k_sig + 1 <= k_cap:
                candidates.append(k_sig + 1)
        else:
            candidates.append(0)  # every ratio is above sigma; 0 is closest
    if not candidates:
        candidates = [0]  # floor removal already above the cap
    best = min(candidates, key=lambda k: (abs(ratio(k) - sigma), ratio(k)))
    if abs(ratio(best) - sigma) > RATIO_TOLERANCE + _EPS:
        if force_closest:
            widened = {0, k_sig, min((k_sig or 0) + 1, n)} - {None}
            best = min(widened, key=lambda k: (abs(ratio(k) - sigma), ratio(k)))
            log.info("force-closest: accepting ratio %.6f for sigma %.3f", ratio(best), sigma)
        else:
            raise CalibrationError(
                f"cannot reach sigma={sigma} within +/-{RATIO_TOLERANCE}; "
                f"closest achievable ratio is {ratio(best):.6f} at tau={100.0 * best / n:.4f} "
                "(rerun with --force-closest to accept)",
                closest_ratio=ratio(best),
                closest_tau=100.0 * best / n,
            )
    return best, ratio(best)


def _score_dimensions(
    config: ModelConfig,
    weights: WeightStore,
    vocab: Vocab,
    corpora: list[DimensionCorpus],
    universe: NeuronUniverse,
    score_config: ScoreConfig,
    fp: str,
    threads: int,
) -> list[ImpactMatrix]:
    if not corpora:
        raise ValidationError("at least one dimension corpus required")
    if len(corpora) > 3:
        raise ValidationError("at most three dimension corpora supported")
    return [
        score_corpus(config, weights, vocab, c, universe, score_config, fingerprint=fp, threads=threads)
        for c in corpora
    ]


def calibrate(
    config: ModelConfig,
    weights: WeightStore,
    vocab: Vocab,
    corpora: list[DimensionCorpus],
    universe: NeuronUniverse,
    sigma: float,
    *,
    score_config: ScoreConfig = ScoreConfig(),
    threads: int = 1,
    force_closest: bool = False,
    seed: int | None = None,
) -> PrunePlan:
    """Search tau so the intersected plan removes a sigma fraction of params."""
    total = config.parameter_count()
    idx = pool_indices(universe)
    pool_weights = np.array([universe.param_weights[i] for i in idx], dtype=np.int64)
    prunable_fraction = float(pool_weights.sum()) / total
    if not 0.0 < sigma < prunable_fraction:
        raise ValidationError(
            f"sigma must be in (0, {prunable_fraction:.4f}) "
            f"(prunable fraction of this model), got {sigma}"
        )
    fp = fingerprint(config, weights)
    matrices = _score_dimensions(config, weights, vocab, corpora, universe, score_config, fp, threads)
    rank_mats = [pool_ranks(m) for m in matrices]
    k, achieved = _pick_cutoff(rank_mats, pool_weights, total, 0, sigma, force_closest)
    mask = _combined_mask(rank_mats, k)
    neurons = tuple(universe.neurons[i] for i in idx[mask])
    removed = int(pool_weights[mask].sum())
    tau = 100.0 * k / len(idx)
    log.info(
        "calibrated tau=%.4f: removing %d neurons, %d params (ratio %.6f, target %.3f)",
        tau, len(neurons), removed, achieved, sigma,
    )
    return PrunePlan(
        fingerprint=fp,
        sigma=sigma,
        tau=tau,
        phases=(PlanPhase("neuron", neurons),),
        achieved_ratio=round(achieved, 6),
        removed_params=removed,
        total_params=total,
        provenance=_provenance(matrices, score_config, seed),
    )


def _provenance(matrices: list[ImpactMatrix], score_config: ScoreConfig, seed: int | None) -> dict:
    return {
        "dimensions": [
            {"label": m.dimension, "documents": len(m.doc_ids)} for m in matrices
        ],
        "max_tokens_per_doc": score_config.max_tokens_per_doc,
        "seed": seed,
    }


def plan_at_tau(
    config: ModelConfig,
    weights: WeightStore,
    vocab: Vocab,
    corpora: list[DimensionCorpus],
    universe: NeuronUniverse,
    tau: float,
    *,
    score_config: ScoreConfig = ScoreConfig(),
    threads: int = 1,
    seed: int | None = None,
) -> PrunePlan:
    """Build a plan at a fixed tau, skipping calibration."""
    total = config.parameter_count()
    idx = pool_indices(universe)
    fp = fingerprint(config, weights)
    matrices = _score_dimensions(config, weights, vocab, corpora, universe, score_config, fp, threads)
    rank_mats = [pool_ranks(m) for m in matrices]
    k = rank_cutoff(tau, len(idx))
    mask = _combined_mask(rank_mats, k)
    neurons = tuple(universe.neurons[i] for i in idx[mask])
    removed = int(sum(universe.param_weights[i] for i in idx[mask]))
    return PrunePlan(
        fingerprint=fp,
        sigma=removed / total,
        tau=tau,
        phases=(PlanPhase("neuron", neurons),),
        achieved_ratio=round(removed / total, 6),
        removed_params=removed,
        total_params=total,
        provenance=_provenance(matrices, score_config, seed),
    )


# --- layer baseline --------------------------------------------------------


def layer_scores(
    config: ModelConfig,
    weights: WeightStore,
    vocab: Vocab,
    corpus: DimensionCorpus,
    score_config: ScoreConfig = ScoreConfig(),
) -> list[LayerScore]:
    """Block-influence importance: 1 - mean cosine(block input, block output).

    The mean is taken per document over token positions, then across
    documents. Low importance means the block barely rotates the
    residual stream and is the first candidate for removal.
    """
    if len(corpus.documents) == 0:
        raise ValidationError("empty corpus")
    limit = min(score_config.max_tokens_per_doc, config.max_seq_len)
    per_layer_doc_means = [[] for _ in range(config.n_layers)]
    for doc in corpus.documents:
        ids = tokenize(vocab, doc.text)[:limit]
        if not ids:
            raise ValidationError(f"document {doc.id!r}: empty after tokenization")
        _, tr = forward(config, weights, ids, trace=True)
        assert tr is not None
        for l in range(config.n_layers):
            a = tr.resid_pre_attn[l].astype(np.float64)
            b = tr.ffn_out[l].astype(np.float64)
            na = np.linalg.norm(a, axis=1)
            nb = np.linalg.norm(b, axis=1)
            denom = na * nb
            cos = np.ones(len(ids), dtype=np.float64)  # both zero: identical
            nonzero = denom > 0.0
            cos[nonzero] = np.sum(a[nonzero] * b[nonzero], axis=1) / denom[nonzero]
            cos[(na > 0) != (nb > 0)] = 0.0  # exactly one side zero: orthogonal
            per_layer_doc_means[l].append(float(np.mean(cos)))
    return [
        LayerScore(layer=l, importance=1.0 - float(np.mean(per_layer_doc_means[l])))
        for l in range(config.n_layers)
    ]


def aggressive_plan(
    config: ModelConfig,
    weights: WeightStore,
    vocab: Vocab,
    corpora: list[DimensionCorpus],
    universe: NeuronUniverse,
    sigma: float,
    layer_budget: int,
    *,
    score_config: ScoreConfig = ScoreConfig(),
    threads: int = 1,
    force_closest: bool = False,
    seed: int | None = None,
) -> PrunePlan:
    """Drop the least important layers, then calibrate neurons to sigma total."""
    if layer_budget < 0 or layer_budget >= config.n_layers:
        raise ValidationError(
            f"layer budget must be in [0, n_layers), got {layer_budget} for {config.n_layers} layers"
        )
    if layer_budget == 0:
        return calibrate(
            config, weights, vocab, corpora, universe, sigma,
            score_config=score_config, threads=threads, force_closest=force_closest, seed=seed,
        )
    if not corpora:
        raise ValidationError("at least one dimension corpus required")
    total = config.parameter_count()
    fp = fingerprint(config, weights)

    pooled_docs = tuple(doc for c in corpora for doc in c.documents)
    scoring_corpus = DimensionCorpus(fixed=(), documents=pooled_docs)
    scores = layer_scores(config, weights, vocab, scoring_corpus, score_config)
    order = sorted(scores, key=lambda s: (s.importance, s.layer))
    doomed = sorted(s.layer for s in order[:layer_budget])
    layer_ids = tuple(NeuronId(l, NeuronClass.LAYER_UNIT, -1, l) for l in doomed)
    layer_removed = sum(
        universe.param_weights[universe.index_of(n)] for n in layer_ids
    )
    log.info("layer phase: dropping layers %s (%d params)", doomed, layer_removed)

    slim_config, slim_weights = _drop_layers(config, weights, doomed)
    slim_universe = enumerate_neurons(slim_config)
    idx = pool_indices(slim_universe)
    pool_weights = np.array([slim_universe.param_weights[i] for i in idx], dtype=np.int64)
    max_fraction = (layer_removed + float(pool_weights.sum())) / total
    if not 0.0 < sigma < max_fraction:
        raise ValidationError(
            f"sigma must be in (0, {max_fraction:.4f}) for this layer budget, got {sigma}"
        )
    matrices = _score_dimensions(
        slim_config, slim_weights, vocab, corpora, slim_universe, score_config,
        fingerprint(slim_config, slim_weights), threads,
    )
    rank_mats = [pool_ranks(m) for m in matrices]
    k, achieved = _pick_cutoff(rank_mats, pool_weights, total, layer_removed, sigma, force_closest)
    mask = _combined_mask(rank_mats, k)
    neurons = tuple(slim_universe.neurons[i] for i in idx[mask])
    removed = layer_removed + int(pool_weights[mask].sum())
    tau = 100.0 * k / len(idx)
    prov = _provenance(matrices, score_config, seed)
    prov["layer_importances"] = [
        {"layer": s.layer, "importance": round(s.importance, 9)} for s in scores
    ]
    return PrunePlan(
        fingerprint=fp,
        sigma=sigma,
        tau=tau,
        phases=(PlanPhase("layer", layer_ids), PlanPhase("neuron", neurons)),
        achieved_ratio=round(achieved, 6),
        removed_params=removed,
        total_params=total,
        provenance=prov,
    )


# --- plan application ------------------------------------------------------


def _drop_layers(
    config: ModelConfig, weights: WeightStore, doomed: list[int]
) -> tuple[ModelConfig, WeightStore]:
    doomed_set = set(doomed)
    survivors = [l for l in range(config.n_layers) if l not in doomed_set]
    overrides = []
    for new_idx, old_idx in enumerate(survivors):
        ov = config._override(old_idx)
        if ov is not None:
            overrides.append(
                LayerOverride(new_idx, ov.d_ff_actual, ov.n_heads_actual, ov.v_dims)
            )
    new_config = replace(config, n_layers=len(survivors), layers=tuple(overrides))
    new_weights: WeightStore = {
        name: weights[name] for name in ("embed", "final_norm", "unembed")
    }
    for new_idx, old_idx in enumerate(survivors):
        for name, arr in weights.items():
            if name.startswith(f"layer.{old_idx}."):
                suffix = name.split(".", 2)[2]
                new_weights[f"layer.{new_idx}.{suffix}"] = arr
    return new_config, new_weights


def _remove_neurons(
    config: ModelConfig, weights: WeightStore, ids: tuple[NeuronId, ...]
) -> tuple[ModelConfig, WeightStore]:
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate neurons in plan phase")
    removed_heads: dict[int, set[int]] = {}
    for n in ids:
        if n.cls is NeuronClass.ATTN_HEAD:
            removed_heads.setdefault(n.layer, set()).add(n.index)
        elif n.cls is NeuronClass.LAYER_UNIT:
            raise ValidationError("layer units belong in a layer phase, not a neuron phase")
    for n in ids:
        if n.cls is NeuronClass.ATTN_VALUE_CHANNEL and n.head in removed_heads.get(n.layer, ()):
            raise ValidationError(
                f"plan removes head L{n.layer}.head.{n.head} and its channel {n.canonical()}"
            )

    deletions: dict[tuple[str, int], list[int]] = {}
    ffn_removed: dict[int, int] = {}
    vchan_removed: dict[tuple[int, int], int] = {}
    for n in ids:
        for sl in coupled_slices(n, config):  # validates each id against config
            deletions.setdefault((sl.tensor, sl.axis), []).append(sl.index)
        if n.cls is NeuronClass.FFN_CHANNEL:
            ffn_removed[n.layer] = ffn_removed.get(n.layer, 0) + 1
        elif n.cls is NeuronClass.ATTN_VALUE_CHANNEL:
            key = (n.layer, n.head)
            vchan_removed[key] = vchan_removed.get(key, 0) + 1

    new_weights = dict(weights)
    for (tensor, axis), indices in deletions.items():
        # descending order so earlier removals cannot shift later ones
        new_weights[tensor] = np.delete(
            new_weights[tensor], sorted(set(indices), reverse=True), axis=axis
        )

    overrides = []
    for l in range(config.n_layers):
        v_dims = []
        for h in range(config.n_heads_at(l)):
            if h in removed_heads.get(l, ()):
                continue
            v_dims.append(config.v_dims_at(l)[h] - vchan_removed.get((l, h), 0))
        overrides.append(
            LayerOverride(
                layer_index=l,
                d_ff_actual=config.d_ff_at(l) - ffn_removed.get(l, 0),
                n_heads_actual=config.n_heads_at(l) - len(removed_heads.get(l, ())),
                v_dims=tuple(v_dims),
            )
        )
    return replace(config, layers=tuple(overrides)), new_weights


def apply_plan(
    config: ModelConfig, weights: WeightStore, plan: PrunePlan
) -> tuple[ModelConfig, WeightStore]:
    """Remove every planned neuron; output stays a loadable bundle."""
    fp = fingerprint(config, weights)
    if fp != plan.fingerprint:
        raise FingerprintMismatch(
            f"plan was built for {plan.fingerprint[:12]}..., weights hash to {fp[:12]}..."
        )
    cur_config, cur_weights = config, dict(weights)
    for phase in plan.phases:
        if phase.kind == "layer":
            for n in phase.ids:
                if n.cls is not NeuronClass.LAYER_UNIT:
                    raise ValidationError(f"layer phase contains non-layer id {n.canonical()}")
                if not 0 <= n.layer < cur_config.n_layers:
                    raise ValidationError(f"plan layer {n.layer} out of range")
            cur_config, cur_weights = _drop_layers(
                cur_config, cur_weights, sorted({n.layer for n in phase.ids})
            )
        elif phase.kind == "neuron":
            cur_config, cur_weights = _remove_neurons(cur_config, cur_weights, phase.ids)
        else:
            raise ValidationError(f"unknown plan phase kind {phase.kind!r}")
    new_total = cur_config.parameter_count()
    if new_total != plan.total_params - plan.removed_params:
        raise ValidationError(
            f"plan accounting mismatch: pruned model has {new_total} params, "
            f"plan promised {plan.total_params - plan.removed_params}"
        )
    cur_config = cur_config.with_meta(
        pruned_from=plan.fingerprint, achieved_ratio=plan.achieved_ratio
    )
    return cur_config, cur_weights


# --- plan persistence ------------------------------------------------------


def plan_to_json(plan: PrunePlan) -> dict:
    return {
        "fingerprint": plan.fingerprint,
        "sigma": plan.sigma,
        "tau": plan.tau,
        "achieved_ratio": plan.achieved_ratio,
        "removed_params": plan.removed_params,
        "total_params": plan.total_params,
        "phases": [
            {"kind": p.kind, "ids": [n.canonical() for n in p.ids]} for p in plan.phases
        ],
        "provenance": plan.provenance,
    }


def plan_from_json(doc: dict) -> PrunePlan:
    try:
        phases = tuple(
            PlanPhase(p["kind"], tuple(NeuronId.parse(s) for s in p["ids"]))
            for p in doc["phases"]
        )
        return PrunePlan(
            fingerprint=doc["fingerprint"],
            sigma=float(doc["sigma"]),
            tau=float(doc["tau"]),
            phases=phases,
            achieved_ratio=float(doc["achieved_ratio"]),
            removed_params=int(doc["removed_params"]),
            total_params=int(doc["total_params"]),
            provenance=dict(doc.get("provenance", {})),
        )
    except KeyError as exc:
        raise ValidationError(f"plan file missing key {exc}") from exc


def save_plan(plan: PrunePlan, path) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(plan_to_json(plan), indent=2, sort_keys=True) + "\n"
    fd, tmp = tempfile.mkstemp(prefix=target.name, dir=target.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_plan(path) -> PrunePlan:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed plan file: {exc}") from exc
    return plan_from_json(doc)
