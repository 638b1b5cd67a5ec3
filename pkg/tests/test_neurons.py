"""Neuron enumeration, slice coupling, and shape-closure properties."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import make_config, random_weights

from cusprune import (
    NeuronClass,
    NeuronId,
    ValidationError,
    coupled_slices,
    enumerate_neurons,
)
from cusprune.model import LayerOverride, validate_weights


class TestEnumerate:
    def test_counts_from_config(self):
        cfg = make_config(n_layers=2, d_ff=16, n_heads=2, head_dim=4, d_model=8)
        uni = enumerate_neurons(cfg)
        by_class = {}
        for n in uni.neurons:
            by_class[n.cls] = by_class.get(n.cls, 0) + 1
        assert by_class[NeuronClass.FFN_CHANNEL] == 32
        assert by_class[NeuronClass.ATTN_VALUE_CHANNEL] == 16
        assert by_class[NeuronClass.ATTN_HEAD] == 4
        assert by_class[NeuronClass.LAYER_UNIT] == 2

    def test_override_changes_counts(self):
        cfg = make_config(
            n_layers=2, d_ff=16, n_heads=2, head_dim=4, d_model=8,
            layers=(LayerOverride(0, 12, 2, (4, 4)),),
        )
        uni = enumerate_neurons(cfg)
        layer0_ffn = [n for n in uni.neurons if n.cls is NeuronClass.FFN_CHANNEL and n.layer == 0]
        assert len(layer0_ffn) == 12

    def test_canonical_order(self, toy_config):
        uni = enumerate_neurons(toy_config)
        assert uni.neurons[0] == NeuronId(0, NeuronClass.FFN_CHANNEL, -1, 0)
        assert list(uni.neurons) == sorted(uni.neurons)
        assert len(set(uni.neurons)) == len(uni.neurons)

    def test_prunable_weight_sum(self, toy_config):
        uni = enumerate_neurons(toy_config)
        pool_sum = sum(
            w
            for n, w in zip(uni.neurons, uni.param_weights)
            if n.cls in (NeuronClass.FFN_CHANNEL, NeuronClass.ATTN_VALUE_CHANNEL)
        )
        d = toy_config.d_model
        expected = sum(
            3 * d * toy_config.d_ff_at(l) + 2 * d * toy_config.v_width_at(l)
            for l in range(toy_config.n_layers)
        )
        assert pool_sum == expected


class TestCoupledSlices:
    def test_ffn_channel(self):
        cfg = make_config(d_model=8, n_heads=2, head_dim=4)
        slices = coupled_slices(NeuronId(0, NeuronClass.FFN_CHANNEL, -1, 3), cfg)
        assert {(s.tensor, s.axis, s.index) for s in slices} == {
            ("layer.0.ffn.up", 0, 3),
            ("layer.0.ffn.gate", 0, 3),
            ("layer.0.ffn.down", 1, 3),
        }

    def test_value_channel_offset(self):
        cfg = make_config(d_model=8, n_heads=2, head_dim=4)
        slices = coupled_slices(NeuronId(1, NeuronClass.ATTN_VALUE_CHANNEL, 1, 2), cfg)
        assert {(s.tensor, s.axis, s.index) for s in slices} == {
            ("layer.1.attn.wv", 0, 6),
            ("layer.1.attn.wo", 1, 6),
        }

    def test_head_includes_qk_rows_and_value_channels(self):
        cfg = make_config(d_model=8, n_heads=2, head_dim=4)
        slices = coupled_slices(NeuronId(0, NeuronClass.ATTN_HEAD, -1, 1), cfg)
        tensors = {s.tensor for s in slices}
        assert tensors == {
            "layer.0.attn.wq",
            "layer.0.attn.wk",
            "layer.0.attn.wv",
            "layer.0.attn.wo",
        }
        wq_rows = {s.index for s in slices if s.tensor.endswith("wq")}
        assert wq_rows == {4, 5, 6, 7}

    def test_ffn_param_weight(self):
        cfg = make_config(d_model=8, n_heads=2, head_dim=4)
        uni = enumerate_neurons(cfg)
        n = NeuronId(0, NeuronClass.FFN_CHANNEL, -1, 0)
        assert uni.param_weights[uni.index_of(n)] == 24  # 3 x d_model

    def test_invalid_neuron_rejected(self, toy_config):
        with pytest.raises(ValidationError):
            coupled_slices(NeuronId(0, NeuronClass.FFN_CHANNEL, -1, toy_config.d_ff), toy_config)
        with pytest.raises(ValidationError):
            coupled_slices(NeuronId(toy_config.n_layers, NeuronClass.LAYER_UNIT, -1, 0), toy_config)

    def test_same_class_slices_disjoint(self, toy_config):
        a = coupled_slices(NeuronId(0, NeuronClass.FFN_CHANNEL, -1, 1), toy_config)
        b = coupled_slices(NeuronId(0, NeuronClass.FFN_CHANNEL, -1, 2), toy_config)
        assert not ({(s.tensor, s.axis, s.index) for s in a} & {(s.tensor, s.axis, s.index) for s in b})
        c = coupled_slices(NeuronId(0, NeuronClass.ATTN_HEAD, -1, 0), toy_config)
        d = coupled_slices(NeuronId(0, NeuronClass.ATTN_HEAD, -1, 1), toy_config)
        assert not ({(s.tensor, s.axis, s.index) for s in c} & {(s.tensor, s.axis, s.index) for s in d})

    def test_pool_slice_sizes_cover_prunable_params(self, toy_config):
        uni = enumerate_neurons(toy_config)
        shapes = toy_config.tensor_shapes()
        covered = 0
        for n in uni.neurons:
            if n.cls not in (NeuronClass.FFN_CHANNEL, NeuronClass.ATTN_VALUE_CHANNEL):
                continue
            for s in coupled_slices(n, toy_config):
                shape = shapes[s.tensor]
                covered += shape[1] if s.axis == 0 else shape[0]
        pool_sum = sum(
            w
            for n, w in zip(uni.neurons, uni.param_weights)
            if n.cls in (NeuronClass.FFN_CHANNEL, NeuronClass.ATTN_VALUE_CHANNEL)
        )
        assert covered == pool_sum


class TestCanonicalStrings:
    @pytest.mark.parametrize(
        "neuron,text",
        [
            (NeuronId(0, NeuronClass.FFN_CHANNEL, -1, 3), "L0.ffn.3"),
            (NeuronId(1, NeuronClass.ATTN_VALUE_CHANNEL, 1, 2), "L1.vchan.1.2"),
            (NeuronId(0, NeuronClass.ATTN_HEAD, -1, 1), "L0.head.1"),
            (NeuronId(2, NeuronClass.LAYER_UNIT, -1, 2), "L2.layer.2"),
        ],
    )
    def test_roundtrip(self, neuron, text):
        assert neuron.canonical() == text
        assert NeuronId.parse(text) == neuron

    def test_parse_rejects_garbage(self):
        for bad in ("", "L0", "X0.ffn.1", "L0.nope.1", "L0.vchan.1", "L0.ffn.1.2"):
            with pytest.raises(ValidationError):
                NeuronId.parse(bad)


class TestShapeClosure:
    def test_random_single_neuron_removal_keeps_shapes(self):
        # removing any pool neuron (plus config adjustment) must keep the
        # weight store valid for the adjusted config
        from cusprune.engine import _remove_neurons

        rng = np.random.default_rng(42)
        cfg = make_config(n_layers=2, d_ff=12, n_heads=2, head_dim=4, d_model=8)
        weights = random_weights(cfg, seed=1)
        uni = enumerate_neurons(cfg)
        candidates = [
            n
            for n in uni.neurons
            if n.cls in (NeuronClass.FFN_CHANNEL, NeuronClass.ATTN_VALUE_CHANNEL, NeuronClass.ATTN_HEAD)
        ]
        for _ in range(25):
            n = candidates[rng.integers(0, len(candidates))]
            new_cfg, new_weights = _remove_neurons(cfg, weights, (n,))
            validate_weights(new_cfg, new_weights)
