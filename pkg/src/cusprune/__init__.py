"""Structured pruning toolkit: carve dimension-specific expert models out
of a dense decoder-only transformer by removing neurons that are
irrelevant to every document of the target language/domain/task corpora.
"""

from .bundle import Vocab, byte_vocab, fingerprint, load_bundle, save_bundle
from .corpus import (
    DimensionCorpus,
    Document,
    build_dimension_corpus,
    detokenize,
    load_documents,
    tokenize,
)
from .engine import (
    LayerScore,
    PlanPhase,
    PrunePlan,
    aggressive_plan,
    apply_plan,
    calibrate,
    intersect_dimensions,
    layer_scores,
    load_plan,
    plan_at_tau,
    save_plan,
)
from .errors import CalibrationError, FingerprintMismatch, ValidationError
from .evalharness import (
    EvalReport,
    bench_speed,
    expert_report,
    flop_count,
    greedy_decode,
    mcq_accuracy,
    perplexity,
    rouge_l,
)
from .model import ForwardTrace, LayerOverride, ModelConfig, forward, logprobs, rmsnorm
from .neurons import (
    NeuronClass,
    NeuronId,
    NeuronUniverse,
    SliceInstruction,
    coupled_slices,
    enumerate_neurons,
)
from .relevance import (
    ImpactMatrix,
    IrrelevantSet,
    ScoreConfig,
    irrelevant_set,
    load_impacts,
    load_irrelevant_set,
    save_impacts,
    save_irrelevant_set,
    score_corpus,
    score_document,
    score_document_oracle,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
