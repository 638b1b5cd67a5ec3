"""Prunable units and the tensor slices coupled to each.

A neuron is a set of matrix rows/columns that must be removed together:
an FFN intermediate channel (up/gate row + down column), an attention
value channel (wv row + wo column), a whole attention head (its q/k rows
plus all of its value channels), or a whole layer. The canonical order
(layer, class, head, index) is the serialization order everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

from .errors import ValidationError
from .model import LAYER_TENSOR_SUFFIXES, ModelConfig


class NeuronClass(IntEnum):
    FFN_CHANNEL = 0
    ATTN_VALUE_CHANNEL = 1
    ATTN_HEAD = 2
    LAYER_UNIT = 3


_CLASS_TOKENS = {
    NeuronClass.FFN_CHANNEL: "ffn",
    NeuronClass.ATTN_VALUE_CHANNEL: "vchan",
    NeuronClass.ATTN_HEAD: "head",
    NeuronClass.LAYER_UNIT: "layer",
}
_TOKEN_CLASSES = {v: k for k, v in _CLASS_TOKENS.items()}

# Classes eligible for the percentile pruning pool; heads and layers are
# only ever removed explicitly (aggressive combo / baseline).
POOL_CLASSES = (NeuronClass.FFN_CHANNEL, NeuronClass.ATTN_VALUE_CHANNEL)


@dataclass(frozen=True, order=True)
class NeuronId:
    layer: int
    cls: NeuronClass
    head: int  # -1 for classes without a head coordinate
    index: int

    def canonical(self) -> str:
        tok = _CLASS_TOKENS[self.cls]
        if self.cls is NeuronClass.ATTN_VALUE_CHANNEL:
            return f"L{self.layer}.{tok}.{self.head}.{self.index}"
        return f"L{self.layer}.{tok}.{self.index}"

    @staticmethod
    def parse(text: str) -> "NeuronId":
        parts = text.strip().split(".")
        if len(parts) < 3 or not parts[0].startswith("L"):
            raise ValidationError(f"bad neuron id: {text!r}")
        try:
            layer = int(parts[0][1:])
            cls = _TOKEN_CLASSES[parts[1]]
            if cls is NeuronClass.ATTN_VALUE_CHANNEL:
                if len(parts) != 4:
                    raise ValidationError(f"bad neuron id: {text!r}")
                return NeuronId(layer, cls, int(parts[2]), int(parts[3]))
            if len(parts) != 3:
                raise ValidationError(f"bad neuron id: {text!r}")
            return NeuronId(layer, cls, -1, int(parts[2]))
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"bad neuron id: {text!r}") from exc


@dataclass(frozen=True)
class SliceInstruction:
    tensor: str
    axis: int  # 0 = rows, 1 = columns
    index: int


@dataclass(frozen=True)
class NeuronUniverse:
    """All neurons of a config, canonical order, with parameter weights."""

    neurons: tuple[NeuronId, ...]
    param_weights: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.neurons)

    def index_of(self, neuron: NeuronId) -> int:
        try:
            return self._index[neuron]
        except AttributeError:
            object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.neurons)})
            return self._index[neuron]


def _validate_neuron(neuron: NeuronId, config: ModelConfig) -> None:
    if not 0 <= neuron.layer < config.n_layers:
        raise ValidationError(f"neuron {neuron.canonical()}: layer out of range")
    if neuron.cls is NeuronClass.FFN_CHANNEL:
        if neuron.head != -1 or not 0 <= neuron.index < config.d_ff_at(neuron.layer):
            raise ValidationError(f"neuron {neuron.canonical()}: bad ffn channel")
    elif neuron.cls is NeuronClass.ATTN_VALUE_CHANNEL:
        if not 0 <= neuron.head < config.n_heads_at(neuron.layer):
            raise ValidationError(f"neuron {neuron.canonical()}: head out of range")
        if not 0 <= neuron.index < config.v_dims_at(neuron.layer)[neuron.head]:
            raise ValidationError(f"neuron {neuron.canonical()}: value channel out of range")
    elif neuron.cls is NeuronClass.ATTN_HEAD:
        if neuron.head != -1 or not 0 <= neuron.index < config.n_heads_at(neuron.layer):
            raise ValidationError(f"neuron {neuron.canonical()}: head index out of range")
    else:
        if neuron.head != -1 or neuron.index != neuron.layer:
            raise ValidationError(f"neuron {neuron.canonical()}: layer unit index must equal layer")


def enumerate_neurons(config: ModelConfig) -> NeuronUniverse:
    neurons: list[NeuronId] = []
    weights: list[int] = []
    d = config.d_model
    for layer in range(config.n_layers):
        v_dims = config.v_dims_at(layer)
        for i in range(config.d_ff_at(layer)):
            neurons.append(NeuronId(layer, NeuronClass.FFN_CHANNEL, -1, i))
            weights.append(3 * d)
        for h in range(config.n_heads_at(layer)):
            for j in range(v_dims[h]):
                neurons.append(NeuronId(layer, NeuronClass.ATTN_VALUE_CHANNEL, h, j))
                weights.append(2 * d)
        for h in range(config.n_heads_at(layer)):
            neurons.append(NeuronId(layer, NeuronClass.ATTN_HEAD, -1, h))
            weights.append(2 * config.head_dim * d + 2 * v_dims[h] * d)
        neurons.append(NeuronId(layer, NeuronClass.LAYER_UNIT, -1, layer))
        layer_params = (
            2 * config.qk_width_at(layer) * d
            + 2 * config.v_width_at(layer) * d
            + 3 * config.d_ff_at(layer) * d
            + 2 * d
        )
        weights.append(layer_params)
    return NeuronUniverse(tuple(neurons), tuple(weights))


def _v_row_offset(config: ModelConfig, layer: int, head: int) -> int:
    return sum(config.v_dims_at(layer)[:head])


def coupled_slices(neuron: NeuronId, config: ModelConfig) -> list[SliceInstruction]:
    """Tensor rows/columns that removing this neuron deletes, in one list."""
    _validate_neuron(neuron, config)
    l = neuron.layer
    if neuron.cls is NeuronClass.FFN_CHANNEL:
        i = neuron.index
        return [
            SliceInstruction(f"layer.{l}.ffn.up", 0, i),
            SliceInstruction(f"layer.{l}.ffn.gate", 0, i),
            SliceInstruction(f"layer.{l}.ffn.down", 1, i),
        ]
    if neuron.cls is NeuronClass.ATTN_VALUE_CHANNEL:
        row = _v_row_offset(config, l, neuron.head) + neuron.index
        return [
            SliceInstruction(f"layer.{l}.attn.wv", 0, row),
            SliceInstruction(f"layer.{l}.attn.wo", 1, row),
        ]
    if neuron.cls is NeuronClass.ATTN_HEAD:
        h = neuron.index
        slices = []
        for j in range(config.v_dims_at(l)[h]):
            row = _v_row_offset(config, l, h) + j
            slices.append(SliceInstruction(f"layer.{l}.attn.wv", 0, row))
            slices.append(SliceInstruction(f"layer.{l}.attn.wo", 1, row))
        for r in range(h * config.head_dim, (h + 1) * config.head_dim):
            slices.append(SliceInstruction(f"layer.{l}.attn.wq", 0, r))
            slices.append(SliceInstruction(f"layer.{l}.attn.wk", 0, r))
        return slices
    # whole layer: every row of every tensor owned by the layer
    slices = []
    shapes = config.tensor_shapes()
    for suffix in LAYER_TENSOR_SUFFIXES:
        name = f"layer.{l}.{suffix}"
        for r in range(shapes[name][0]):
            slices.append(SliceInstruction(name, 0, r))
    return slices
