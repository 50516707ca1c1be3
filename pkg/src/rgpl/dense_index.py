"""Exhaustive dense index: top-k search and hard-negative pool mining.

Snapshots are immutable; a refresh builds a new snapshot. Search is exact
(full dot-product scan) with ties broken by ascending doc_id, so every
downstream property is testable without approximate-search noise.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .data import Corpus, QuerySet
from .encoder import EncoderParams, encode_bags, params_hash

SNAPSHOT_MAGIC = b"RGPLIX01"


class IndexSnapshot:
    """Frozen document-embedding matrix tagged with its training step."""

    def __init__(
        self,
        doc_ids: list[str],
        embeddings: np.ndarray,
        built_at_step: int,
        encoder_checkpoint_hash: str,
    ):
        if len(doc_ids) != embeddings.shape[0]:
            raise ValueError("doc_ids and embedding rows must align 1:1")
        if built_at_step < 0:
            raise ValueError("built_at_step must be >= 0")
        self.doc_ids = list(doc_ids)
        self.embeddings = embeddings
        self.built_at_step = built_at_step
        self.encoder_checkpoint_hash = encoder_checkpoint_hash
        # rank of each row's doc_id in lexicographic order, for tie-breaks
        order = sorted(range(len(doc_ids)), key=lambda i: self.doc_ids[i])
        self._id_rank = np.empty(len(doc_ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(doc_ids))
        self._row_of = {doc_id: i for i, doc_id in enumerate(self.doc_ids)}

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def out_dim(self) -> int:
        return self.embeddings.shape[1]

    def row_of(self, doc_id: str) -> int:
        return self._row_of[doc_id]

    def snapshot_hash(self) -> str:
        """Content hash over doc ids, embedding bytes, and encoder hash."""
        h = hashlib.sha256()
        h.update("\x1f".join(self.doc_ids).encode())
        h.update(np.ascontiguousarray(self.embeddings).tobytes())
        h.update(self.encoder_checkpoint_hash.encode())
        return h.hexdigest()


def build_index(params: EncoderParams, corpus: Corpus, step: int) -> IndexSnapshot:
    """Encode every document with the given params into a snapshot."""
    if len(corpus) == 0:
        raise ValueError("cannot build an index over an empty corpus")
    bags = corpus.bags()
    try:
        embeddings = encode_bags(params, bags)
    except ValueError:
        # re-raise naming the first offending document
        for doc_id in corpus.doc_ids():
            ids = corpus.content_ids(doc_id)
            if len(ids) and (ids.max() >= params.vocab_size or ids.min() < 0):
                raise ValueError(
                    f"document {doc_id} has token ids outside the encoder vocabulary"
                ) from None
        raise
    return IndexSnapshot(corpus.doc_ids(), embeddings, step, params_hash(params))


def _topk_rows(
    scores: np.ndarray, id_rank: np.ndarray, k: int
) -> list[np.ndarray]:
    """Per-row top-k row indices by (score desc, doc_id asc)."""
    n = scores.shape[1]
    k = min(k, n)
    out = []
    if k < n:
        part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    for i in range(scores.shape[0]):
        row = scores[i]
        if k < n:
            threshold = row[part[i]].min()
            cand = np.flatnonzero(row >= threshold)
        else:
            cand = np.arange(n)
        order = np.lexsort((id_rank[cand], -row[cand]))
        out.append(cand[order[:k]])
    return out


def search_batch(
    index: IndexSnapshot, query_embs: np.ndarray, k: int
) -> list[list[tuple[str, float]]]:
    """Exact top-k for a batch of query embeddings."""
    query_embs = np.atleast_2d(np.asarray(query_embs))
    if k < 1:
        raise ValueError("k must be >= 1")
    if query_embs.shape[1] != index.out_dim:
        raise ValueError(
            f"query dim {query_embs.shape[1]} does not match index dim {index.out_dim}"
        )
    scores = query_embs @ index.embeddings.T
    rows_per_query = _topk_rows(scores, index._id_rank, k)
    results = []
    for qi, rows in enumerate(rows_per_query):
        results.append([(index.doc_ids[r], float(scores[qi, r])) for r in rows])
    return results


def search(index: IndexSnapshot, q_emb: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Top-min(k, num_docs) documents by dot product, descending; ties by
    ascending doc_id."""
    return search_batch(index, np.asarray(q_emb)[None, :], k)[0]


class NegativePool:
    """Per-query ranked hard-negative lists with the positive excluded."""

    def __init__(self, pools: dict[str, tuple[list[str], np.ndarray]], pool_size: int):
        self._pools = pools
        self.pool_size = pool_size

    def __len__(self) -> int:
        return len(self._pools)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._pools

    def query_ids(self) -> list[str]:
        return list(self._pools)

    def doc_ids(self, query_id: str) -> list[str]:
        return self._pools[query_id][0]

    def scores(self, query_id: str) -> np.ndarray:
        return self._pools[query_id][1]

    def entries(self, query_id: str) -> list[tuple[str, float]]:
        ids, scores = self._pools[query_id]
        return [(doc_id, float(s)) for doc_id, s in zip(ids, scores)]

    def sample(self, query_id: str, rng: np.random.Generator) -> str:
        """Uniform draw from the query's pool."""
        ids, _ = self._pools[query_id]
        if not ids:
            raise ValueError(f"empty negative pool for query {query_id}")
        return ids[int(rng.integers(len(ids)))]


def mine_hard_negatives(
    index: IndexSnapshot,
    queries: QuerySet,
    params: EncoderParams,
    pool_size: int = 50,
) -> NegativePool:
    """Per query: search with k = pool_size + 1, drop the positive if
    present, truncate to pool_size."""
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    for query in queries:
        if query.source_doc_id is None:
            raise ValueError(f"query {query.id} has no source_doc_id")
    query_embs = encode_bags(params, queries.bags())
    ranked = search_batch(index, query_embs, pool_size + 1)
    pools: dict[str, tuple[list[str], np.ndarray]] = {}
    for query, hits in zip(queries, ranked):
        kept_ids = []
        kept_scores = []
        for doc_id, s in hits:
            if doc_id == query.source_doc_id:
                continue
            kept_ids.append(doc_id)
            kept_scores.append(s)
            if len(kept_ids) == pool_size:
                break
        pools[query.id] = (kept_ids, np.array(kept_scores))
    return NegativePool(pools, pool_size)


def sample_negative(pool: NegativePool, query_id: str, rng: np.random.Generator) -> str:
    return pool.sample(query_id, rng)


def dump_pool_tsv(pool: NegativePool, path) -> None:
    """Write (query_id, rank, doc_id, score) rows, rank starting at 1."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in pool.query_ids():
            for rank, (doc_id, s) in enumerate(pool.entries(qid), start=1):
                fh.write(f"{qid}\t{rank}\t{doc_id}\t{s!r}\n")


def load_pool_tsv(path, pool_size: int | None = None) -> NegativePool:
    pools: dict[str, tuple[list[str], list[float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 4:
                raise ValueError(f"expected 4 tab-separated columns at line {lineno}")
            qid, _, doc_id, score_str = fields
            ids, scores = pools.setdefault(qid, ([], []))
            ids.append(doc_id)
            scores.append(float(score_str))
    final = {qid: (ids, np.array(scores)) for qid, (ids, scores) in pools.items()}
    if pool_size is None:
        pool_size = max((len(ids) for ids, _ in final.values()), default=0)
    return NegativePool(final, pool_size)


def save_snapshot(index: IndexSnapshot, path) -> None:
    """Persist a snapshot: JSON header + raw row-major float64 matrix."""
    header = json.dumps(
        {
            "doc_ids": index.doc_ids,
            "built_at_step": index.built_at_step,
            "encoder_checkpoint_hash": index.encoder_checkpoint_hash,
            "num_docs": index.num_docs,
            "out_dim": index.out_dim,
        }
    ).encode()
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(index.embeddings).tobytes())


def load_snapshot(path) -> IndexSnapshot:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"not a snapshot file: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len))
        matrix = np.frombuffer(
            fh.read(header["num_docs"] * header["out_dim"] * 8), dtype=np.float64
        ).reshape(header["num_docs"], header["out_dim"])
    return IndexSnapshot(
        header["doc_ids"],
        matrix.copy(),
        header["built_at_step"],
        header["encoder_checkpoint_hash"],
    )
