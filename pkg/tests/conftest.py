from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cusprune import ModelConfig, byte_vocab  # noqa: E402
from cusprune.model import WeightStore  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criterion verdict lines after the run."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)


def make_config(
    n_layers=2,
    d_model=16,
    n_heads=2,
    head_dim=8,
    d_ff=24,
    vocab_size=64,
    max_seq_len=128,
    **kw,
) -> ModelConfig:
    return ModelConfig(
        n_layers=n_layers,
        d_model=d_model,
        n_heads=n_heads,
        head_dim=head_dim,
        d_ff=d_ff,
        vocab_size=vocab_size,
        max_seq_len=max_seq_len,
        **kw,
    )


def random_weights(config: ModelConfig, seed: int = 0, scale: float = 0.5) -> WeightStore:
    """Random float32 weights; norm weights near 1 so activations stay tame."""
    rng = np.random.default_rng(seed)
    weights: WeightStore = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith(("norm1", "norm2")) or name == "final_norm":
            weights[name] = (1.0 + 0.1 * rng.standard_normal(shape)).astype(np.float32)
        else:
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            std = scale / np.sqrt(fan_in)
            weights[name] = (std * rng.standard_normal(shape)).astype(np.float32)
    return weights


def random_tokens(config: ModelConfig, n: int, seed: int = 0) -> list[int]:
    rng = np.random.default_rng(seed)
    return rng.integers(0, config.vocab_size, size=n).tolist()


@pytest.fixture
def toy_config() -> ModelConfig:
    return make_config()


@pytest.fixture
def toy_weights(toy_config) -> WeightStore:
    return random_weights(toy_config, seed=7)


@pytest.fixture
def toy_vocab():
    return byte_vocab()


def make_documents(rng, language: str, domain: str, task: str, count: int, alphabet: str,
                   length: int = 40, prefix: str = "doc"):
    """Random-text documents tagged with one (language, domain, task) triple."""
    from cusprune import Document

    docs = []
    for i in range(count):
        text = "".join(rng.choice(list(alphabet), size=length))
        docs.append(
            Document(
                id=f"{prefix}-{language}-{domain}-{task}-{i}",
                text=text,
                language=language,
                domain=domain,
                task=task,
            )
        )
    return docs
