"""Scoring contracts: fast path vs ablation oracle, percentile set rules."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import make_config, make_documents, random_tokens, random_weights

from cusprune import (
    ImpactMatrix,
    ScoreConfig,
    ValidationError,
    byte_vocab,
    build_dimension_corpus,
    enumerate_neurons,
    irrelevant_set,
    load_impacts,
    load_irrelevant_set,
    save_impacts,
    save_irrelevant_set,
    score_corpus,
    score_document,
    score_document_oracle,
)
from cusprune.model import ModelConfig
from cusprune.neurons import NeuronClass, NeuronId


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def _silu_inverse_of_one():
    """Solve silu(x) = 1 by bisection (silu is increasing for x > 0)."""
    lo, hi = 0.0, 4.0
    for _ in range(200):
        mid = (lo + hi) / 2
        val = mid / (1.0 + np.exp(-mid))
        if val < 1.0:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


class TestFfnFastPath:
    def _crafted(self):
        # one layer, attention zeroed; embed row all-ones so rmsnorm output
        # equals the norm weight; channel 0 tuned to activation 2.0 with a
        # down column of norm 3.0
        cfg = ModelConfig(
            n_layers=1, d_model=2, n_heads=1, head_dim=2, d_ff=2,
            vocab_size=4, max_seq_len=8, norm_eps=1e-12,
        )
        w = {name: np.zeros(shape, dtype=np.float32) for name, shape in cfg.tensor_shapes().items()}
        w["embed"][1] = [1.0, 1.0]
        w["layer.0.norm2"][:] = 1.0
        w["final_norm"][:] = 1.0
        x_star = _silu_inverse_of_one()
        w["layer.0.ffn.up"][0] = [2.0, 0.0]
        w["layer.0.ffn.gate"][0] = [x_star / 2.0, x_star / 2.0]
        w["layer.0.ffn.down"][:, 0] = [3.0, 0.0]
        # channel 1 active but with an all-zero down column
        w["layer.0.ffn.up"][1] = [1.0, 1.0]
        w["layer.0.ffn.gate"][1] = [1.0, 1.0]
        return cfg, w

    def test_single_token_impact_is_activation_times_column_norm(self):
        cfg, w = self._crafted()
        uni = enumerate_neurons(cfg)
        scores = score_document(cfg, w, [1], uni)
        idx = uni.index_of(NeuronId(0, NeuronClass.FFN_CHANNEL, -1, 0))
        assert rel_err(float(scores[idx]), 6.0) < 1e-4  # |a| * ||col|| = 2 * 3

    def test_zero_down_column_scores_zero(self):
        cfg, w = self._crafted()
        uni = enumerate_neurons(cfg)
        scores = score_document(cfg, w, [1], uni)
        idx = uni.index_of(NeuronId(0, NeuronClass.FFN_CHANNEL, -1, 1))
        assert float(scores[idx]) == 0.0


class TestOracleEquivalence:
    def test_all_classes_match_oracle(self):
        rng = np.random.default_rng(123)
        checked = {cls: 0 for cls in NeuronClass}
        for seed in range(3):
            cfg = make_config(n_layers=2, d_model=12, n_heads=2, head_dim=6,
                              d_ff=10, vocab_size=32, max_seq_len=32)
            w = random_weights(cfg, seed=seed)
            ids = random_tokens(cfg, 7, seed=seed + 50)
            uni = enumerate_neurons(cfg)
            fast = score_document(cfg, w, ids, uni)
            for idx in rng.choice(len(uni), size=14, replace=False):
                neuron = uni.neurons[idx]
                oracle = score_document_oracle(cfg, w, ids, neuron)
                assert rel_err(float(fast[idx]), oracle) < 1e-5, neuron.canonical()
                checked[neuron.cls] += 1
        assert all(count > 0 for count in checked.values())

    def test_oracle_zero_for_zero_sublayer(self):
        cfg = make_config(n_layers=1)
        w = random_weights(cfg, seed=2)
        for name in ("ffn.up", "ffn.gate", "ffn.down"):
            w[f"layer.0.{name}"] = np.zeros_like(w[f"layer.0.{name}"])
        assert score_document_oracle(cfg, w, [1, 2, 3], NeuronId(0, NeuronClass.FFN_CHANNEL, -1, 0)) == 0.0

    def test_empty_document_rejected(self, toy_config, toy_weights):
        with pytest.raises(ValidationError, match="empty"):
            score_document(toy_config, toy_weights, [], enumerate_neurons(toy_config))


def _tiny_pool_matrix(values):
    """ImpactMatrix over a universe whose pool has exactly 4 neurons."""
    cfg = make_config(n_layers=1, d_ff=2, n_heads=1, head_dim=2, d_model=2, vocab_size=8)
    uni = enumerate_neurons(cfg)
    full = np.full((len(uni), values.shape[1]), 100.0, dtype=np.float32)
    pool = [i for i, n in enumerate(uni.neurons)
            if n.cls in (NeuronClass.FFN_CHANNEL, NeuronClass.ATTN_VALUE_CHANNEL)]
    assert len(pool) == 4
    for row, i in enumerate(pool):
        full[i] = values[row]
    docs = tuple(f"d{j}" for j in range(values.shape[1]))
    return uni, pool, ImpactMatrix(full, uni, docs, "language:test", "fp")


class TestIrrelevantSet:
    def test_intersection_of_lowest_halves(self):
        # pool rows n1..n4; doc A lowest half {n3, n1}, doc B lowest half {n3, n2}
        values = np.array(
            [
                [2.0, 5.0],   # n1
                [6.0, 2.0],   # n2
                [1.0, 1.0],   # n3
                [7.0, 7.0],   # n4
            ],
            dtype=np.float32,
        )
        uni, pool, matrix = _tiny_pool_matrix(values)
        result = irrelevant_set(matrix, ScoreConfig(tau=50.0))
        assert result.neurons == {uni.neurons[pool[2]]}

    def test_tau_below_one_slot_gives_empty_set(self):
        values = np.arange(8, dtype=np.float32).reshape(4, 2)
        _, _, matrix = _tiny_pool_matrix(values)
        assert irrelevant_set(matrix, ScoreConfig(tau=20.0)).neurons == frozenset()

    def test_single_document_equals_its_lowest_slice(self):
        values = np.array([[4.0], [1.0], [3.0], [2.0]], dtype=np.float32)
        uni, pool, matrix = _tiny_pool_matrix(values)
        result = irrelevant_set(matrix, ScoreConfig(tau=50.0))
        assert result.neurons == {uni.neurons[pool[1]], uni.neurons[pool[3]]}

    def test_ties_break_by_canonical_order(self):
        values = np.zeros((4, 1), dtype=np.float32)  # all tied
        uni, pool, matrix = _tiny_pool_matrix(values)
        result = irrelevant_set(matrix, ScoreConfig(tau=50.0))
        assert result.neurons == {uni.neurons[pool[0]], uni.neurons[pool[1]]}

    def test_tau_monotone(self):
        rng = np.random.default_rng(0)
        values = rng.random((4, 3)).astype(np.float32)
        _, _, matrix = _tiny_pool_matrix(values)
        previous = frozenset()
        for tau in (10.0, 30.0, 50.0, 75.0, 100.0):
            current = irrelevant_set(matrix, ScoreConfig(tau=tau)).neurons
            assert previous <= current
            previous = current

    def test_adding_document_never_grows_set(self):
        rng = np.random.default_rng(1)
        values = rng.random((4, 5)).astype(np.float32)
        for d in range(1, 5):
            _, _, small = _tiny_pool_matrix(values[:, :d])
            _, _, bigger = _tiny_pool_matrix(values[:, : d + 1])
            assert irrelevant_set(bigger, ScoreConfig(tau=50.0)).neurons <= \
                irrelevant_set(small, ScoreConfig(tau=50.0)).neurons

    def test_tau_range_validated(self):
        with pytest.raises(ValidationError):
            ScoreConfig(tau=0.0)
        with pytest.raises(ValidationError):
            ScoreConfig(tau=100.5)


class TestScaleCovariance:
    def test_down_column_scale_multiplies_impact_exactly(self, toy_config, toy_weights):
        uni = enumerate_neurons(toy_config)
        ids = random_tokens(toy_config, 6, seed=3)
        base = score_document(toy_config, toy_weights, ids, uni)
        neuron = NeuronId(1, NeuronClass.FFN_CHANNEL, -1, 5)
        idx = uni.index_of(neuron)
        for k in (0.0, 2.0):  # exact in binary floating point
            scaled = dict(toy_weights)
            t = scaled["layer.1.ffn.down"].copy()
            t[:, 5] *= np.float32(k)
            scaled["layer.1.ffn.down"] = t
            out = score_document(toy_config, scaled, ids, uni)
            assert float(out[idx]) == k * float(base[idx])

    def test_wo_column_scale(self, toy_config, toy_weights):
        uni = enumerate_neurons(toy_config)
        ids = random_tokens(toy_config, 6, seed=3)
        base = score_document(toy_config, toy_weights, ids, uni)
        neuron = NeuronId(0, NeuronClass.ATTN_VALUE_CHANNEL, 1, 3)
        col = 1 * toy_config.head_dim + 3
        idx = uni.index_of(neuron)
        scaled = dict(toy_weights)
        t = scaled["layer.0.attn.wo"].copy()
        t[:, col] *= np.float32(2.0)
        scaled["layer.0.attn.wo"] = t
        out = score_document(toy_config, scaled, ids, uni)
        assert float(out[idx]) == 2.0 * float(base[idx])


class TestScoreCorpus:
    def _setup(self):
        cfg = make_config(vocab_size=256)
        w = random_weights(cfg, seed=5)
        rng = np.random.default_rng(8)
        docs = make_documents(rng, "de", "news", "qa", 4, "abcdefgh ")
        corpus = build_dimension_corpus(docs, {"language": "de"})
        return cfg, w, byte_vocab(), corpus, enumerate_neurons(cfg)

    def test_single_doc_column_matches_score_document(self):
        cfg, w, vocab, corpus, uni = self._setup()
        from cusprune.corpus import tokenize

        one = build_dimension_corpus(list(corpus.documents[:1]), {"language": "de"})
        matrix = score_corpus(cfg, w, vocab, one, uni, ScoreConfig())
        direct = score_document(cfg, w, tokenize(vocab, one.documents[0].text), uni)
        np.testing.assert_array_equal(matrix.values[:, 0], direct)

    def test_document_order_permutation_keeps_set(self):
        cfg, w, vocab, corpus, uni = self._setup()
        matrix = score_corpus(cfg, w, vocab, corpus, uni, ScoreConfig())
        reordered = build_dimension_corpus(list(corpus.documents[::-1]), {"language": "de"})
        matrix2 = score_corpus(cfg, w, vocab, reordered, uni, ScoreConfig())
        sc = ScoreConfig(tau=40.0)
        assert irrelevant_set(matrix, sc).neurons == irrelevant_set(matrix2, sc).neurons

    def test_threaded_scoring_bit_identical(self):
        cfg, w, vocab, corpus, uni = self._setup()
        a = score_corpus(cfg, w, vocab, corpus, uni, ScoreConfig(), threads=1)
        b = score_corpus(cfg, w, vocab, corpus, uni, ScoreConfig(), threads=4)
        np.testing.assert_array_equal(a.values, b.values)

    def test_truncation_respects_max_tokens(self):
        cfg, w, vocab, corpus, uni = self._setup()
        a = score_corpus(cfg, w, vocab, corpus, uni, ScoreConfig(max_tokens_per_doc=5))
        assert a.values.shape[1] == len(corpus)

    def test_default_corpus_size_within_budget(self):
        # 50 documents per dimension is the default working size; a 2-layer
        # toy must score such a corpus in seconds, not minutes
        import time

        cfg = make_config(vocab_size=256)
        w = random_weights(cfg, seed=6)
        rng = np.random.default_rng(7)
        docs = make_documents(rng, "de", "news", "qa", 50, "abcdefgh ", length=200)
        corpus = build_dimension_corpus(docs, {"language": "de"})
        start = time.time()
        matrix = score_corpus(cfg, w, byte_vocab(), corpus, enumerate_neurons(cfg), ScoreConfig())
        assert time.time() - start < 10.0
        assert matrix.values.shape[1] == 50


class TestPersistence:
    def test_impacts_roundtrip(self, tmp_path):
        cfg = make_config()
        uni = enumerate_neurons(cfg)
        rng = np.random.default_rng(0)
        values = rng.random((len(uni), 3)).astype(np.float32)
        matrix = ImpactMatrix(values, uni, ("a", "b", "c"), "language:de", "fp123")
        save_impacts(matrix, tmp_path / "impacts.bin")
        loaded = load_impacts(tmp_path / "impacts.bin", uni)
        np.testing.assert_array_equal(loaded.values, values)
        assert loaded.doc_ids == ("a", "b", "c")
        assert loaded.dimension == "language:de"
        assert loaded.fingerprint == "fp123"

    def test_irrelevant_set_roundtrip(self, tmp_path):
        cfg = make_config()
        uni = enumerate_neurons(cfg)
        members = frozenset([uni.neurons[0], uni.neurons[5], uni.neurons[30]])
        from cusprune import IrrelevantSet

        iset = IrrelevantSet("language:de", members, {"tau": 25.0, "documents": 3})
        save_irrelevant_set(iset, tmp_path / "set.txt")
        text = (tmp_path / "set.txt").read_text()
        assert text.startswith("# provenance: ")
        loaded = load_irrelevant_set(tmp_path / "set.txt", "language:de")
        assert loaded.neurons == members
        assert loaded.provenance["tau"] == 25.0
