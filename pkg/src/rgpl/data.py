"""Corpus, query, and judgment ingestion plus synthetic domain generation.

File formats accepted:
  - corpus/queries: BEIR-style line-delimited JSON (one record per line,
    ``_id`` or ``id`` key, optional ``title``, ``text``)
  - qrels: TREC TSV with 4 columns (query_id, iteration, doc_id, grade)
  - vocabulary: one token per line; the line number is the token id

Synthetic corpora plant a latent topic vector per document; the topic
geometry doubles as the ground-truth relevance signal for evaluation.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

logger = logging.getLogger(__name__)

CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
UNK_TOKEN = "[UNK]"
MAX_SEQ_LEN = 350

# Default relevance-grade thresholds on topic cosine for planted qrels.
GRADE2_MIN_COS = 0.9
GRADE1_MIN_COS = 0.7

_WORD_RE = re.compile(r"[0-9a-z_]+")


class DataFormatError(ValueError):
    """Raised when an input file violates its documented format."""


class Vocabulary:
    """Fixed token list; position in the list is the token id."""

    def __init__(self, tokens: list[str]):
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise DataFormatError("vocabulary contains duplicate tokens")
        for required in (CLS_TOKEN, SEP_TOKEN, UNK_TOKEN):
            if required not in self._ids:
                raise DataFormatError(f"vocabulary missing required token {required}")
        self.cls_id = self._ids[CLS_TOKEN]
        self.sep_id = self._ids[SEP_TOKEN]
        self.unk_id = self._ids[UNK_TOKEN]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def token_of(self, token_id: int) -> str:
        return self._tokens[token_id]

    @classmethod
    def synthetic(cls, num_content_tokens: int) -> "Vocabulary":
        """Specials plus ``w0000 .. wNNNN`` content words."""
        words = [f"w{i:04d}" for i in range(num_content_tokens)]
        return cls([CLS_TOKEN, SEP_TOKEN, UNK_TOKEN] + words)

    @classmethod
    def from_texts(cls, texts, max_size: int | None = None) -> "Vocabulary":
        """Build a vocabulary from raw texts, most frequent words first.

        Ties are broken alphabetically so the result is deterministic.
        """
        counts: dict[str, int] = {}
        for text in texts:
            for word in _WORD_RE.findall(text.lower()):
                counts[word] = counts.get(word, 0) + 1
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        if max_size is not None:
            ordered = ordered[: max(0, max_size - 3)]
        return cls([CLS_TOKEN, SEP_TOKEN, UNK_TOKEN] + ordered)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self._tokens:
                fh.write(token + "\n")


@dataclass
class TokenSeq:
    """Bounded token-id sequence bracketed by [CLS] ... [SEP]."""

    ids: np.ndarray
    has_cls: bool = True
    has_sep: bool = True

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.ids) > MAX_SEQ_LEN:
            raise ValueError(f"token sequence longer than {MAX_SEQ_LEN}")

    def __len__(self) -> int:
        return len(self.ids)

    def content_ids(self) -> np.ndarray:
        """Token ids with the leading [CLS] and trailing [SEP] stripped."""
        start = 1 if self.has_cls else 0
        end = len(self.ids) - 1 if self.has_sep else len(self.ids)
        return self.ids[start:end]


def tokenize(text: str, vocab: Vocabulary) -> TokenSeq:
    """Lowercased whitespace/punctuation tokenization into a TokenSeq.

    Out-of-vocabulary words map to [UNK]. The result is truncated so the
    total length never exceeds 350 with [SEP] always final.
    """
    words = _WORD_RE.findall(text.lower())
    words = words[: MAX_SEQ_LEN - 2]
    ids = [vocab.cls_id] + [vocab.id_of(w) for w in words] + [vocab.sep_id]
    return TokenSeq(np.array(ids, dtype=np.int64))


def detokenize(seq: TokenSeq, vocab: Vocabulary) -> str:
    """Space-joined content tokens; [UNK] renders as its literal marker."""
    return " ".join(vocab.token_of(int(i)) for i in seq.content_ids())


@dataclass
class Document:
    id: str
    text: str
    latent_topic: np.ndarray | None = None


@dataclass
class Query:
    id: str
    text: str
    source_doc_id: str | None = None


class _TokenizedCollection:
    """Shared machinery: id-addressable items with cached token arrays."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._content_ids: dict[str, np.ndarray] = {}
        self._bags: csr_matrix | None = None

    def _texts_by_id(self) -> dict[str, str]:
        raise NotImplementedError

    def ids(self) -> list[str]:
        raise NotImplementedError

    def tokens(self, item_id: str) -> TokenSeq:
        """Lazily derived TokenSeq for one item."""
        content = self.content_ids(item_id)
        ids = np.concatenate(([self.vocab.cls_id], content, [self.vocab.sep_id]))
        return TokenSeq(ids)

    def content_ids(self, item_id: str) -> np.ndarray:
        cached = self._content_ids.get(item_id)
        if cached is None:
            text = self._texts_by_id()[item_id]
            cached = tokenize(text, self.vocab).content_ids()
            self._content_ids[item_id] = cached
        return cached

    def bags(self) -> csr_matrix:
        """Row-normalized token-count matrix (items x vocab), cached.

        Row i is the mean-pooling weight vector of item i: count/length over
        content tokens, all-zero for items with no content tokens.
        """
        if self._bags is None:
            vocab_size = len(self.vocab)
            indptr = [0]
            indices: list[np.ndarray] = []
            data: list[np.ndarray] = []
            for item_id in self.ids():
                ids = self.content_ids(item_id)
                uniq, counts = np.unique(ids, return_counts=True)
                indices.append(uniq)
                data.append(counts / max(len(ids), 1))
                indptr.append(indptr[-1] + len(uniq))
            self._bags = csr_matrix(
                (
                    np.concatenate(data) if data else np.empty(0),
                    np.concatenate(indices) if indices else np.empty(0, dtype=np.int64),
                    np.array(indptr, dtype=np.int64),
                ),
                shape=(len(indptr) - 1, vocab_size),
            )
        return self._bags


class Corpus(_TokenizedCollection):
    """Ordered document collection sharing one vocabulary."""

    def __init__(self, documents: list[Document], vocab: Vocabulary):
        super().__init__(vocab)
        self._docs: dict[str, Document] = {}
        for doc in documents:
            if doc.id in self._docs:
                raise DataFormatError(f"duplicate document id {doc.id}")
            self._docs[doc.id] = doc
        self._row_of = {doc_id: i for i, doc_id in enumerate(self._docs)}

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self):
        return iter(self._docs.values())

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def get(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    def doc_ids(self) -> list[str]:
        return list(self._docs)

    def ids(self) -> list[str]:
        return self.doc_ids()

    def row_of(self, doc_id: str) -> int:
        return self._row_of[doc_id]

    def _texts_by_id(self) -> dict[str, str]:
        return {doc_id: doc.text for doc_id, doc in self._docs.items()}

    def topic_matrix(self) -> np.ndarray:
        """Stacked latent topic vectors, rows aligned with doc_ids().

        Raises if any document lacks a latent topic (non-synthetic corpora).
        """
        rows = []
        for doc in self:
            if doc.latent_topic is None:
                raise ValueError(f"document {doc.id} has no latent topic")
            rows.append(doc.latent_topic)
        return np.vstack(rows)


class QuerySet(_TokenizedCollection):
    """Ordered query collection sharing one vocabulary."""

    def __init__(self, queries: list[Query], vocab: Vocabulary):
        super().__init__(vocab)
        self._queries: dict[str, Query] = {}
        for query in queries:
            if query.id in self._queries:
                raise DataFormatError(f"duplicate query id {query.id}")
            self._queries[query.id] = query
        self._row_of = {qid: i for i, qid in enumerate(self._queries)}

    def __len__(self) -> int:
        return len(self._queries)

    def __iter__(self):
        return iter(self._queries.values())

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._queries

    def get(self, query_id: str) -> Query:
        return self._queries[query_id]

    def query_ids(self) -> list[str]:
        return list(self._queries)

    def ids(self) -> list[str]:
        return self.query_ids()

    def row_of(self, query_id: str) -> int:
        return self._row_of[query_id]

    def _texts_by_id(self) -> dict[str, str]:
        return {qid: q.text for qid, q in self._queries.items()}


class Qrels:
    """Graded relevance judgments: query_id -> {doc_id -> grade >= 0}."""

    def __init__(self, judgments: dict[str, dict[str, int]]):
        for qid, docs in judgments.items():
            for did, grade in docs.items():
                if grade < 0:
                    raise ValueError(f"negative grade for ({qid}, {did})")
        self._judgments = judgments

    def __len__(self) -> int:
        return len(self._judgments)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._judgments

    def query_ids(self) -> list[str]:
        return list(self._judgments)

    def grades_for(self, query_id: str) -> dict[str, int]:
        return self._judgments.get(query_id, {})

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._judgments.get(query_id, {}).get(doc_id, 0)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for qid, docs in self._judgments.items():
                for did, grade in docs.items():
                    fh.write(f"{qid}\t0\t{did}\t{grade}\n")


def _parse_beir_line(line: str, lineno: int) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"malformed JSON at line {lineno}: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise DataFormatError(f"malformed record at line {lineno}: not an object")
    return record


def load_beir_corpus(path, vocab: Vocabulary | None = None) -> Corpus:
    """Load a BEIR-style line-delimited corpus file.

    Args:
        path: file with one JSON record per line; each record carries an
            ``_id`` (or ``id``), optional ``title``, and ``text``. A record
            may also carry a ``latent_topic`` list (synthetic corpora).
        vocab: vocabulary to attach; when omitted, one is built from the
            loaded texts (most frequent words first).

    Returns:
        Corpus with title and text concatenated (title first, single space
        separator); document order preserved.
    """
    documents = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = _parse_beir_line(line, lineno)
            doc_id = record.get("_id", record.get("id"))
            if doc_id is None:
                raise DataFormatError(f"missing id at line {lineno}")
            doc_id = str(doc_id)
            if doc_id in seen:
                raise DataFormatError(f"duplicate id {doc_id} at line {lineno}")
            seen.add(doc_id)
            if "text" not in record:
                raise DataFormatError(f"missing text at line {lineno}")
            parts = [p for p in (record.get("title", ""), record["text"]) if p]
            latent = record.get("latent_topic")
            documents.append(
                Document(
                    id=doc_id,
                    text=" ".join(parts),
                    latent_topic=None if latent is None else np.asarray(latent, dtype=float),
                )
            )
    if vocab is None:
        vocab = Vocabulary.from_texts(doc.text for doc in documents)
    return Corpus(documents, vocab)


def load_beir_queries(path, vocab: Vocabulary) -> QuerySet:
    """Load a BEIR-style line-delimited queries file.

    Records carry ``_id`` (or ``id``) and ``text``; an optional
    ``source_doc_id`` marks generated pseudo-queries.
    """
    queries = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = _parse_beir_line(line, lineno)
            query_id = record.get("_id", record.get("id"))
            if query_id is None:
                raise DataFormatError(f"missing id at line {lineno}")
            query_id = str(query_id)
            if query_id in seen:
                raise DataFormatError(f"duplicate id {query_id} at line {lineno}")
            seen.add(query_id)
            if "text" not in record:
                raise DataFormatError(f"missing text at line {lineno}")
            queries.append(
                Query(id=query_id, text=record["text"], source_doc_id=record.get("source_doc_id"))
            )
    return QuerySet(queries, vocab)


def load_qrels(path) -> Qrels:
    """Load TREC-format qrels (qid, iteration, docid, grade; tab-separated).

    Repeated (qid, docid) pairs keep the last grade seen and emit a warning.
    """
    judgments: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 4:
                raise DataFormatError(f"expected 4 tab-separated columns at line {lineno}")
            qid, _, did, grade_str = fields
            try:
                grade = int(grade_str)
            except ValueError:
                raise DataFormatError(f"non-integer grade at line {lineno}") from None
            if grade < 0:
                raise DataFormatError(f"negative grade at line {lineno}")
            per_query = judgments.setdefault(qid, {})
            if did in per_query:
                logger.warning(
                    "duplicate qrels entry (%s, %s) at line %d: keeping grade %d",
                    qid, did, lineno, grade,
                )
            per_query[did] = grade
    return Qrels(judgments)


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Parameters of one synthetic domain.

    ``token_range`` restricts the topic blocks to a window of the content
    vocabulary so two domains over a shared vocabulary can have disjoint
    topical wordings; the (1 - skew) background mass still covers the whole
    vocabulary. ``topic_jitter`` spreads per-document topic mixtures around
    their topic center, which grades the planted relevance signal.
    """

    vocab_size: int
    num_docs: int
    num_topics: int
    doc_len_range: tuple[int, int]
    topic_token_skew: float
    seed: int
    token_range: tuple[int, int] | None = None
    topic_jitter: float = 0.5

    def validate(self) -> None:
        if self.vocab_size < 1 or self.num_docs < 1 or self.num_topics < 1:
            raise ValueError("vocab_size, num_docs, num_topics must be >= 1")
        if self.num_topics > self.vocab_size:
            raise ValueError("num_topics must not exceed vocab_size")
        lo, hi = self.doc_len_range
        if not (4 <= lo <= hi <= 348):
            raise ValueError("doc_len_range must lie within [4, 348]")
        if not (0.0 < self.topic_token_skew <= 1.0):
            raise ValueError("topic_token_skew must be in (0, 1]")
        if not (0.0 <= self.topic_jitter <= 1.0):
            raise ValueError("topic_jitter must be in [0, 1]")
        if self.token_range is not None:
            a, b = self.token_range
            if not (0 <= a < b <= self.vocab_size):
                raise ValueError("token_range must be a nonempty window of the content vocab")
            if b - a < self.num_topics:
                raise ValueError("token_range too narrow for num_topics")


class PlantedQrelsGenerator:
    """Derives graded qrels from noiseless topic alignment.

    Grade 2 where cos(topic(q), topic(d)) >= grade2_min, grade 1 where
    >= grade1_min, else unjudged (grade 0).
    """

    def __init__(self, corpus: Corpus):
        self.corpus = corpus

    def __call__(
        self,
        queries: QuerySet,
        grade2_min: float = GRADE2_MIN_COS,
        grade1_min: float = GRADE1_MIN_COS,
    ) -> Qrels:
        doc_topics = self.corpus.topic_matrix()
        doc_ids = self.corpus.doc_ids()
        judgments: dict[str, dict[str, int]] = {}
        for query in queries:
            if query.source_doc_id is None:
                raise ValueError(f"query {query.id} has no source_doc_id")
            q_topic = self.corpus.get(query.source_doc_id).latent_topic
            if q_topic is None:
                raise ValueError(f"source doc {query.source_doc_id} has no latent topic")
            cos = doc_topics @ q_topic
            grades: dict[str, int] = {}
            for row in np.flatnonzero(cos >= grade1_min):
                grades[doc_ids[row]] = 2 if cos[row] >= grade2_min else 1
            judgments[query.id] = grades
        return Qrels(judgments)


def generate_synthetic_corpus(spec: SyntheticDomainSpec) -> tuple[Corpus, PlantedQrelsGenerator]:
    """Generate a topic-structured corpus with planted relevance.

    Each document draws a topic mixture concentrated on one of
    ``num_topics`` centers; its tokens are sampled from the corresponding
    mixture of per-topic token distributions and its unit-normalized
    mixture is recorded as ``latent_topic``. Pure function of the spec.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    vocab = Vocabulary.synthetic(spec.vocab_size)

    lo, hi = spec.token_range if spec.token_range is not None else (0, spec.vocab_size)
    blocks = np.array_split(np.arange(lo, hi), spec.num_topics)
    background = np.full(spec.vocab_size, (1.0 - spec.topic_token_skew) / spec.vocab_size)

    len_lo, len_hi = spec.doc_len_range
    documents = []
    for i in range(spec.num_docs):
        topic = int(rng.integers(spec.num_topics))
        mixture = np.zeros(spec.num_topics)
        mixture[topic] = 1.0 - spec.topic_jitter
        mixture += spec.topic_jitter * rng.dirichlet(np.ones(spec.num_topics))
        latent = mixture / np.linalg.norm(mixture)

        token_probs = background.copy()
        for t, block in enumerate(blocks):
            token_probs[block] += spec.topic_token_skew * mixture[t] / len(block)
        token_probs /= token_probs.sum()

        length = int(rng.integers(len_lo, len_hi + 1))
        content = rng.choice(spec.vocab_size, size=length, p=token_probs)
        text = " ".join(vocab.token_of(c + 3) for c in content)
        documents.append(Document(id=f"d{i:06d}", text=text, latent_topic=latent))

    corpus = Corpus(documents, vocab)
    return corpus, PlantedQrelsGenerator(corpus)


def generate_pseudo_queries(
    corpus: Corpus,
    queries_per_doc: int,
    noise: float,
    seed: int,
    doc_ids: list[str] | None = None,
    id_prefix: str = "q",
) -> QuerySet:
    """Generate pseudo-queries by span sampling plus noise injection.

    Each query takes a contiguous span of words from its source document
    and appends ``round(noise * span_length)`` random vocabulary words.
    ``doc_ids`` restricts generation to a subset of the corpus.
    """
    if len(corpus) == 0:
        raise ValueError("cannot generate queries from an empty corpus")
    if queries_per_doc < 1:
        raise ValueError("queries_per_doc must be >= 1")
    if not (0.0 <= noise <= 1.0):
        raise ValueError("noise must be in [0, 1]")

    rng = np.random.default_rng(seed)
    content_words = [
        vocab_tok
        for vocab_tok in (corpus.vocab.token_of(i) for i in range(len(corpus.vocab)))
        if vocab_tok not in (CLS_TOKEN, SEP_TOKEN, UNK_TOKEN)
    ]
    target_ids = corpus.doc_ids() if doc_ids is None else list(doc_ids)

    queries = []
    counter = 0
    for doc_id in target_ids:
        doc = corpus.get(doc_id)
        words = doc.text.split()
        if not words:
            raise ValueError(f"document {doc_id} has no words to sample from")
        for _ in range(queries_per_doc):
            span_len = int(rng.integers(min(3, len(words)), min(10, len(words)) + 1))
            start = int(rng.integers(0, len(words) - span_len + 1))
            span = words[start : start + span_len]
            n_noise = int(round(noise * span_len))
            noise_words = [content_words[int(rng.integers(len(content_words)))] for _ in range(n_noise)]
            queries.append(
                Query(
                    id=f"{id_prefix}{counter:06d}",
                    text=" ".join(span + noise_words),
                    source_doc_id=doc_id,
                )
            )
            counter += 1
    return QuerySet(queries, corpus.vocab)
