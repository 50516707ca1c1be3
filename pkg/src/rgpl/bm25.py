"""Okapi BM25 over the shared tokenizer; the lexical baseline.

score(q, d) = sum over query tokens t of
    idf(t) * tf / (tf + k1 * (1 - b + b * len_d / avg_len))
with idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)), which never goes
negative. Repeated query tokens contribute once per occurrence. Documents
matching no query term score 0 and are ranked by ascending doc_id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .data import Corpus, TokenSeq, Vocabulary


@dataclass
class Bm25Index:
    postings: dict[int, list[tuple[str, int]]]  # term id -> [(doc_id, tf)]
    doc_lengths: dict[str, int]
    avg_doc_len: float
    num_docs: int
    b: float = 0.75
    k1: float = 1.2
    idf: dict[int, float] = field(default_factory=dict)
    sorted_doc_ids: list[str] = field(default_factory=list)


def build_bm25(corpus: Corpus, vocab: Vocabulary, b: float = 0.75, k1: float = 1.2) -> Bm25Index:
    """Build an inverted index over non-special tokens of the corpus."""
    if len(corpus) == 0:
        raise ValueError("cannot build BM25 over an empty corpus")
    if not (0.0 <= b <= 1.0) or k1 <= 0.0:
        raise ValueError("require b in [0, 1] and k1 > 0")
    postings: dict[int, list[tuple[str, int]]] = {}
    doc_lengths: dict[str, int] = {}
    for doc_id in corpus.doc_ids():
        ids = corpus.content_ids(doc_id)
        doc_lengths[doc_id] = len(ids)
        tf: dict[int, int] = {}
        for t in ids.tolist():
            tf[t] = tf.get(t, 0) + 1
        for t, count in tf.items():
            postings.setdefault(t, []).append((doc_id, count))
    n = len(corpus)
    avg_len = sum(doc_lengths.values()) / n
    idf = {
        t: math.log(1.0 + (n - len(plist) + 0.5) / (len(plist) + 0.5))
        for t, plist in postings.items()
    }
    return Bm25Index(
        postings=postings,
        doc_lengths=doc_lengths,
        avg_doc_len=avg_len,
        num_docs=n,
        b=b,
        k1=k1,
        idf=idf,
        sorted_doc_ids=sorted(doc_lengths),
    )


def bm25_search(index: Bm25Index, query: TokenSeq, k: int) -> list[tuple[str, float]]:
    """Top-min(k, num_docs) documents, score descending, ties by doc_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, index.num_docs)
    scores: dict[str, float] = {}
    for t in query.content_ids().tolist():
        plist = index.postings.get(t)
        if plist is None:
            continue
        idf = index.idf[t]
        for doc_id, tf in plist:
            norm = index.k1 * (
                1.0 - index.b + index.b * index.doc_lengths[doc_id] / index.avg_doc_len
            )
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf / (tf + norm)
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))[:k]
    if len(ranked) < k:
        scored = set(scores)
        for doc_id in index.sorted_doc_ids:
            if doc_id not in scored:
                ranked.append((doc_id, 0.0))
                if len(ranked) == k:
                    break
    return ranked
