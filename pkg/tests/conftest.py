"""Shared fixtures: hand-built embeddings for unit tests and the trained
demo models (built once per session) for end-to-end tests."""

from __future__ import annotations

import numpy as np
import pytest

from vuln2rule.corpus import OOV_WORD, Vocabulary
from vuln2rule.embedding import EmbeddingConfig, EmbeddingModel


def make_embedding(vectors: dict[str, np.ndarray]) -> EmbeddingModel:
    """Embedding with explicit rows; the OOV row is all-zero so that OOV
    words exercise the zero-vector path."""
    dim = len(next(iter(vectors.values())))
    words = (OOV_WORD, *vectors.keys())
    w_in = np.zeros((len(words), dim))
    for i, word in enumerate(words[1:], start=1):
        w_in[i] = np.asarray(vectors[word], dtype=float)
    vocab = Vocabulary(
        words=words,
        index_of={w: i for i, w in enumerate(words)},
        coverage=1.0,
    )
    return EmbeddingModel(
        vocab=vocab,
        w_in=w_in,
        w_out=np.zeros((dim, len(words))),
        config=EmbeddingConfig(dim=dim),
    )


@pytest.fixture(scope="session")
def demo_models():
    from vuln2rule.demo import build_demo_models

    return build_demo_models()
