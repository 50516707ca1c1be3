"""Retrieval evaluation: run production, NDCG@k, Success@k, Wilcoxon test.

Metric conventions follow trec_eval: exponential gain (2^rel - 1) for
NDCG, queries whose judgments are entirely zero (or missing) excluded
from aggregates and reported separately.

The one-sided Wilcoxon signed-rank test (H1: median(a - b) > 0) drops
zero differences, averages tied ranks, uses the exact permutation
distribution of the positive-rank sum for n <= 25 non-zero pairs, and a
normal approximation with tie-corrected variance and continuity
correction above.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Qrels, QuerySet
from .dense_index import IndexSnapshot, search_batch
from .encoder import EncoderParams, encode_bags

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25


class RunFile:
    """Per-query ranked (doc_id, score) lists, scores non-increasing."""

    def __init__(self, rankings: dict[str, list[tuple[str, float]]]):
        for qid, hits in rankings.items():
            seen = set()
            prev = math.inf
            for doc_id, s in hits:
                if doc_id in seen:
                    raise ValueError(f"duplicate doc {doc_id} in run for query {qid}")
                seen.add(doc_id)
                if s > prev:
                    raise ValueError(f"scores not non-increasing for query {qid}")
                prev = s
        self._rankings = rankings

    def __len__(self) -> int:
        return len(self._rankings)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._rankings

    def query_ids(self) -> list[str]:
        return list(self._rankings)

    def hits(self, query_id: str) -> list[tuple[str, float]]:
        return self._rankings[query_id]

    def save_trec(self, path, tag: str = "rgpl") -> None:
        """Write TREC run format: qid Q0 docid rank score tag."""
        with open(path, "w", encoding="utf-8") as fh:
            for qid in self.query_ids():
                for rank, (doc_id, s) in enumerate(self.hits(qid), start=1):
                    fh.write(f"{qid} Q0 {doc_id} {rank} {s!r} {tag}\n")

    @classmethod
    def load_trec(cls, path) -> "RunFile":
        rankings: dict[str, list[tuple[str, float]]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                fields = line.split()
                if len(fields) != 6:
                    raise ValueError(f"expected 6 whitespace-separated fields at line {lineno}")
                qid, _, doc_id, _, score_str, _ = fields
                rankings.setdefault(qid, []).append((doc_id, float(score_str)))
        return cls(rankings)


@dataclass
class MetricReport:
    metric: str
    cutoff: int
    per_query: dict[str, float]
    aggregate: float
    excluded: list[str]

    def save(self, path_prefix) -> None:
        """Write per-query TSV (<prefix>.tsv) and JSON summary (<prefix>.json)."""
        with open(f"{path_prefix}.tsv", "w", encoding="utf-8") as fh:
            for qid, value in self.per_query.items():
                fh.write(f"{qid}\t{value!r}\n")
        summary = {
            "metric": self.metric,
            "cutoff": self.cutoff,
            "aggregate": self.aggregate,
            "num_queries": len(self.per_query),
            "excluded": self.excluded,
        }
        with open(f"{path_prefix}.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load_per_query(path) -> dict[str, float]:
        values: dict[str, float] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    qid, value = line.rstrip("\n").split("\t")
                    values[qid] = float(value)
        return values


def produce_run(
    params: EncoderParams, index: IndexSnapshot, queries: QuerySet, depth: int = 100
) -> RunFile:
    """Retrieve the top-``depth`` documents for every query."""
    query_embs = encode_bags(params, queries.bags())
    ranked = search_batch(index, query_embs, depth)
    return RunFile({q.id: hits for q, hits in zip(queries, ranked)})


def _report(
    metric: str, cutoff: int, run: RunFile, qrels: Qrels, per_query_fn
) -> MetricReport:
    per_query: dict[str, float] = {}
    excluded: list[str] = []
    for qid in run.query_ids():
        grades = qrels.grades_for(qid)
        if qid not in qrels:
            logger.warning("query %s in run but not in qrels: excluded", qid)
            excluded.append(qid)
            continue
        if not any(g > 0 for g in grades.values()):
            excluded.append(qid)
            continue
        per_query[qid] = per_query_fn(run.hits(qid), grades)
    if per_query:
        aggregate = float(np.mean(list(per_query.values())))
    else:
        logger.warning("no evaluable queries for %s@%d; aggregate set to 0", metric, cutoff)
        aggregate = 0.0
    return MetricReport(metric, cutoff, per_query, aggregate, excluded)


def ndcg_at_k(run: RunFile, qrels: Qrels, k: int = 10) -> MetricReport:
    """NDCG@k with exponential gain: DCG = sum (2^rel - 1) / log2(i + 1).

    The ideal DCG is computed over the full judged set (not capped at k),
    which keeps NDCG@k non-decreasing in k; with at most k relevant
    documents per query this coincides with the capped convention.
    """
    if k < 1:
        raise ValueError("k must be >= 1")

    def one_query(hits, grades):
        dcg = 0.0
        for i, (doc_id, _) in enumerate(hits[:k], start=1):
            rel = grades.get(doc_id, 0)
            if rel > 0:
                dcg += (2.0**rel - 1.0) / math.log2(i + 1)
        ideal = sorted(grades.values(), reverse=True)
        idcg = sum(
            (2.0**rel - 1.0) / math.log2(i + 1) for i, rel in enumerate(ideal, start=1) if rel > 0
        )
        return dcg / idcg

    return _report("ndcg", k, run, qrels, one_query)


def success_at_k(run: RunFile, qrels: Qrels, k: int = 5) -> MetricReport:
    """1.0 if any document with grade >= 1 appears in the top k, else 0.0."""
    if k < 1:
        raise ValueError("k must be >= 1")

    def one_query(hits, grades):
        return 1.0 if any(grades.get(doc_id, 0) >= 1 for doc_id, _ in hits[:k]) else 0.0

    return _report("success", k, run, qrels, one_query)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties assigned the average of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_rank_sum_counts(ranks: np.ndarray) -> np.ndarray:
    """Counts of subsets of ``ranks`` per doubled rank-sum value.

    Tied ranks are half-integers, so doubling makes every rank integral;
    index j of the result counts sign assignments whose positive-rank sum
    equals j/2. Distribution over all 2^n equally likely assignments.
    """
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    ways = np.zeros(total + 1)
    ways[0] = 1.0
    for r in doubled:
        ways[r:] = ways[r:] + ways[:-r]
    return ways


@dataclass
class WilcoxonResult:
    p_value: float
    statistic: float  # sum of ranks of positive differences
    n: int  # non-zero pairs

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {"p_value": self.p_value, "statistic": self.statistic, "n": self.n},
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")


def wilcoxon_one_sided(a, b) -> WilcoxonResult:
    """One-sided Wilcoxon signed-rank test of H1: median(a - b) > 0.

    Args:
        a, b: equal-length paired value sequences (pair i of ``a`` against
            pair i of ``b``).

    Returns:
        WilcoxonResult with the p-value, the positive-rank-sum statistic,
        and the number of non-zero pairs. All-zero differences yield
        p = 1.0 with a warning.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length 1-d sequences")
    diff = a - b
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        warnings.warn("all paired differences are zero; p-value is 1.0", stacklevel=2)
        return WilcoxonResult(p_value=1.0, statistic=0.0, n=0)

    ranks = _average_ranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        ways = _exact_rank_sum_counts(ranks)
        w2 = int(round(2.0 * w_plus))
        p = float(ways[w2:].sum() / 2.0**n)
    else:
        mean = n * (n + 1) / 4.0
        variance = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(np.abs(diff), return_counts=True)
        variance -= float((tie_counts**3 - tie_counts).sum()) / 48.0
        z = (w_plus - mean - 0.5) / math.sqrt(variance)
        p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return WilcoxonResult(p_value=p, statistic=w_plus, n=n)


def wilcoxon_reports(report_a: MetricReport, report_b: MetricReport) -> WilcoxonResult:
    """Pair two metric reports by query id and test H1: a > b."""
    shared = [qid for qid in report_a.per_query if qid in report_b.per_query]
    if not shared:
        raise ValueError("reports share no query ids")
    a = [report_a.per_query[qid] for qid in shared]
    b = [report_b.per_query[qid] for qid in shared]
    return wilcoxon_one_sided(a, b)
