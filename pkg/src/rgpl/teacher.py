"""Teacher scorer: planted topic-alignment oracle or file-backed table.

The oracle scores a (query, doc) pair as weight * cos(topic(q), topic(d))
plus Gaussian noise keyed deterministically by (query_id, doc_id, seed),
where topic(q) is the latent topic of the query's source document. Batching
never perturbs labels because the noise depends only on the pair ids.

Table mode serves externally computed scores; lookups outside the table
are errors, never silently zero.
"""

from __future__ import annotations

import hashlib
import logging

import numpy as np
from scipy.special import ndtri

from .data import Corpus, Document, Query

logger = logging.getLogger(__name__)


def _pair_noise_uniform(query_id: str, doc_id: str, seed: int) -> float:
    digest = hashlib.blake2b(
        f"{query_id}\x1f{doc_id}\x1f{seed}".encode(), digest_size=8
    ).digest()
    return (int.from_bytes(digest, "big") + 0.5) / 2.0**64


class TeacherScores:
    """Cross-encoder stand-in with two modes: ``oracle`` and ``table``."""

    def __init__(
        self,
        mode: str,
        corpus: Corpus | None = None,
        weight: float = 10.0,
        noise_sigma: float = 0.0,
        seed: int = 0,
        table: dict[tuple[str, str], float] | None = None,
    ):
        if mode not in ("oracle", "table"):
            raise ValueError(f"unknown teacher mode {mode!r}")
        if mode == "oracle" and corpus is None:
            raise ValueError("oracle mode requires a corpus")
        if mode == "table" and table is None:
            raise ValueError("table mode requires a score table")
        self.mode = mode
        self.corpus = corpus
        self.weight = weight
        self.noise_sigma = noise_sigma
        self.seed = seed
        self.table = table

    @classmethod
    def oracle(
        cls, corpus: Corpus, weight: float = 10.0, noise_sigma: float = 0.0, seed: int = 0
    ) -> "TeacherScores":
        return cls("oracle", corpus=corpus, weight=weight, noise_sigma=noise_sigma, seed=seed)

    @classmethod
    def from_table(cls, table: dict[tuple[str, str], float]) -> "TeacherScores":
        return cls("table", table=dict(table))

    def _topic_of_doc(self, doc_id: str) -> np.ndarray:
        if doc_id not in self.corpus:
            raise KeyError(f"document {doc_id} not in teacher corpus")
        topic = self.corpus.get(doc_id).latent_topic
        if topic is None:
            raise ValueError(f"document {doc_id} has no latent topic")
        return topic

    def score_by_ids(self, query_id: str, source_doc_id: str | None, doc_id: str) -> float:
        """Score a pair given only identifiers (and the query's source doc)."""
        if self.mode == "table":
            key = (query_id, doc_id)
            if key not in self.table:
                raise KeyError(f"teacher table has no score for pair ({query_id}, {doc_id})")
            return self.table[key]
        if source_doc_id is None:
            raise ValueError(f"query {query_id} has no source_doc_id for the oracle")
        q_topic = self._topic_of_doc(source_doc_id)
        d_topic = self._topic_of_doc(doc_id)
        return self._oracle_score(query_id, q_topic, doc_id, d_topic)

    def _oracle_score(
        self, query_id: str, q_topic: np.ndarray, doc_id: str, d_topic: np.ndarray
    ) -> float:
        cos = float(
            np.dot(q_topic, d_topic)
            / (np.linalg.norm(q_topic) * np.linalg.norm(d_topic))
        )
        value = self.weight * cos
        if self.noise_sigma > 0.0:
            value += self.noise_sigma * float(
                ndtri(_pair_noise_uniform(query_id, doc_id, self.seed))
            )
        return value

    def score(self, query: Query, doc: Document) -> float:
        """Score one (query, document) pair."""
        if self.mode == "table":
            return self.score_by_ids(query.id, query.source_doc_id, doc.id)
        if doc.latent_topic is None:
            raise ValueError(f"document {doc.id} has no latent topic")
        if query.source_doc_id is None:
            raise ValueError(f"query {query.id} has no source_doc_id for the oracle")
        q_topic = self._topic_of_doc(query.source_doc_id)
        return self._oracle_score(query.id, q_topic, doc.id, doc.latent_topic)

    def score_many_by_ids(
        self,
        query_ids: list[str],
        source_doc_ids: list[str | None],
        doc_ids: list[str],
    ) -> np.ndarray:
        """Vectorized scoring of aligned id triples."""
        if self.mode == "table":
            return np.array(
                [
                    self.score_by_ids(qid, src, did)
                    for qid, src, did in zip(query_ids, source_doc_ids, doc_ids)
                ]
            )
        topics = self.corpus.topic_matrix()
        norms = np.linalg.norm(topics, axis=1)
        row = self.corpus.row_of
        src_rows = np.array([row(s) for s in source_doc_ids])
        doc_rows = np.array([row(d) for d in doc_ids])
        cos = np.einsum("ij,ij->i", topics[src_rows], topics[doc_rows])
        cos /= norms[src_rows] * norms[doc_rows]
        values = self.weight * cos
        if self.noise_sigma > 0.0:
            uniforms = np.array(
                [
                    _pair_noise_uniform(qid, did, self.seed)
                    for qid, did in zip(query_ids, doc_ids)
                ]
            )
            values = values + self.noise_sigma * ndtri(uniforms)
        return values

    def margin(self, query: Query, pos_doc: Document, neg_doc: Document) -> float:
        return self.score(query, pos_doc) - self.score(query, neg_doc)

    def margin_by_ids(
        self, query_id: str, source_doc_id: str | None, pos_doc_id: str, neg_doc_id: str
    ) -> float:
        return self.score_by_ids(query_id, source_doc_id, pos_doc_id) - self.score_by_ids(
            query_id, source_doc_id, neg_doc_id
        )


def teacher_score(teacher: TeacherScores, query: Query, doc: Document) -> float:
    return teacher.score(query, doc)


def teacher_margin(
    teacher: TeacherScores, query: Query, pos_doc: Document, neg_doc: Document
) -> float:
    """CE(q, pos) - CE(q, neg)."""
    return teacher.margin(query, pos_doc, neg_doc)


def load_teacher_table(path) -> TeacherScores:
    """Load a TSV of (query_id, doc_id, score) into a table-mode teacher.

    Malformed or duplicate rows are errors.
    """
    table: dict[tuple[str, str], float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 3:
                raise ValueError(f"expected 3 tab-separated columns at line {lineno}")
            qid, did, score_str = fields
            try:
                value = float(score_str)
            except ValueError:
                raise ValueError(f"non-numeric score at line {lineno}") from None
            key = (qid, did)
            if key in table:
                raise ValueError(f"duplicate pair ({qid}, {did}) at line {lineno}")
            table[key] = value
    return TeacherScores.from_table(table)


def save_teacher_table(table: dict[tuple[str, str], float], path) -> None:
    """Write a score table in the TSV format load_teacher_table reads."""
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, did), value in table.items():
            fh.write(f"{qid}\t{did}\t{value!r}\n")
