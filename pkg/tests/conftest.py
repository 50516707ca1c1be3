import numpy as np
import pytest

from rgpl import data


@pytest.fixture()
def tiny_vocab():
    return data.Vocabulary([data.CLS_TOKEN, data.SEP_TOKEN, data.UNK_TOKEN,
                            "alpha", "beta", "gamma", "delta", "runs"])


@pytest.fixture()
def small_corpus():
    """Deterministic 2-topic synthetic corpus used across module tests."""
    spec = data.SyntheticDomainSpec(
        vocab_size=64,
        num_docs=80,
        num_topics=2,
        doc_len_range=(10, 24),
        topic_token_skew=0.9,
        seed=11,
    )
    corpus, qrels_gen = data.generate_synthetic_corpus(spec)
    return corpus, qrels_gen


def make_manual_corpus(docs, latents=None):
    """Corpus over a synthetic vocabulary from (id, text) pairs."""
    vocab = data.Vocabulary.synthetic(32)
    documents = []
    for i, (doc_id, text) in enumerate(docs):
        latent = None if latents is None else np.asarray(latents[i], dtype=float)
        documents.append(data.Document(id=doc_id, text=text, latent_topic=latent))
    return data.Corpus(documents, vocab)
