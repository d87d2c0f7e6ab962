"""Shared fixtures and random-input builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from anchorlm.corpus import SegmentedText
from anchorlm.model import ModelConfig, init_weights


def random_segmented(rng: np.random.Generator, max_len: int = 64) -> SegmentedText:
    """Random SegmentedText satisfying the type invariants: sequences are
    contiguous runs and only a run's final token may be an anchor."""
    length = int(rng.integers(1, max_len + 1))
    ids: list[int] = []
    anchors: list[bool] = []
    seqs: list[int] = []
    seq = 0
    pos = 0
    while pos < length:
        run = min(int(rng.integers(1, 7)), length - pos)
        has_anchor = bool(rng.random() < 0.7)
        for i in range(run):
            ids.append(int(rng.integers(0, 50)))
            anchors.append(has_anchor and i == run - 1)
            seqs.append(seq)
        seq += 1
        pos += run
    seg = SegmentedText(ids=ids, is_anchor=anchors, seq_index=seqs)
    seg.validate()
    return seg


def tiny_config(vocab_size: int = 11, context_len: int = 64) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        n_layers=2,
        n_heads=2,
        d_model=16,
        d_ff=32,
        context_len=context_len,
    )


@pytest.fixture(scope="session")
def tiny_weights():
    return init_weights(tiny_config(), seed=7)
