"""Shared fixtures: a small synthetic multi-language benchmark and encoders."""

import numpy as np
import pytest

from codesearch import corpus, model as mdl


@pytest.fixture(scope="session")
def bench():
    """Synthetic corpus, vocabulary and encoded per-language pairs."""
    spec = corpus.SyntheticSpec.default()
    raw = corpus.generate_synthetic_corpus(spec, 250, seed=11)
    vocab = corpus.build_vocab([p for v in raw.values() for p in v], max_size=512)
    encoded = {lang: corpus.encode_pairs(v, vocab) for lang, v in raw.items()}
    return {
        "spec": spec,
        "vocab": vocab,
        "sources": {k: encoded[k] for k in spec.source_languages()},
        "target": encoded[spec.target_language()],
    }


@pytest.fixture(scope="session")
def small_encoder(bench):
    return mdl.EncoderConfig(
        vocab_size=bench["vocab"].size, d_model=32, n_layers=1, n_heads=2,
        d_ff=64, max_len=20, dropout=0.1,
    )


@pytest.fixture(scope="session")
def tiny_encoder(bench):
    return mdl.EncoderConfig(
        vocab_size=bench["vocab"].size, d_model=16, n_layers=1, n_heads=2,
        d_ff=32, max_len=20, dropout=0.0,
    )


@pytest.fixture(scope="session")
def source_pool(bench):
    """Balanced source-language batch pool for meta-learning tests."""
    corpora = {}
    for lang, pairs in bench["sources"].items():
        deduped = corpus.deduplicate(pairs)
        corpora[lang] = corpus.generate_negatives(deduped, seed=5)
    return corpus.build_batch_pool(corpora, batch_size=8, seed=3)
