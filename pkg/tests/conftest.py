"""Shared fixtures: tiny model specs and random batches for fast tests."""

import numpy as np
import pytest

from convdial.cvae import Batch, Dimensions, ModelSpec


TINY_DIMS = dict(vocab=16, embed=8, max_len=8, turns=2, latent=4, fixed_embed=8,
                 feature_dim=16, cond_channels=4, cond_grid=(2, 2))


def tiny_dims(**overrides):
    merged = dict(TINY_DIMS)
    merged.update(overrides)
    return Dimensions(**merged)


def tiny_spec(kind="answer", **kw):
    dims_over = {k: kw.pop(k) for k in list(kw) if k in TINY_DIMS}
    return ModelSpec(kind=kind, dims=tiny_dims(**dims_over), **kw).validate()


def random_batch(spec: ModelSpec, batch_size: int, rng: np.random.Generator,
                 with_x: bool = True) -> Batch:
    d = spec.dims
    feats = rng.standard_normal((batch_size, d.feature_dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    caption = rng.standard_normal((batch_size, 1, d.fixed_embed, d.max_len))
    x_ids = None
    if with_x:
        m = spec.num_channels
        x_ids = rng.integers(0, d.vocab, size=(batch_size, m, d.max_len))
    ctx = None
    if spec.kind == "answer":
        ctx = rng.integers(0, d.vocab, size=(batch_size, 2 * d.turns - 1, d.max_len))
    return Batch(features=feats, caption_cols=caption, x_ids=x_ids, context_ids=ctx)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _build_tiny_world():
    from convdial.data import corpus_token_lists, encode_corpus, generate_synthetic_corpus
    from convdial.text import build_vocabulary, random_embedding_table

    records = generate_synthetic_corpus(seed=5, n_records=24, turns=2, n_candidates=6,
                                        feature_dim=16)
    vocab = build_vocabulary(corpus_token_lists(records), min_freq=1)
    table = random_embedding_table(vocab.id_to_token[2:], dim=8, seed=2)
    encoded = encode_corpus(records, vocab, table, max_len=8)
    return {"records": records, "vocab": vocab, "table": table, "encoded": encoded}


@pytest.fixture(scope="session")
def world():
    return _build_tiny_world()


def world_spec(world, kind="block", **kw):
    return tiny_spec(kind, vocab=world["vocab"].size, **kw)
