"""Training diagnostics as plain data files: histograms, smoothed series,
pool-relevancy trajectories, and 2-D embedding projections.

Everything here is pure post-processing over persisted runs and logs;
plotting is left to external tools.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .evaluation import RunFile
from .teacher import TeacherScores
from .trainer import TrainLog

DEFAULT_EMA_WINDOW = 50


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    label: str

    def __post_init__(self):
        if len(self.counts) != len(self.bin_edges) - 1:
            raise ValueError("need len(counts) == len(bin_edges) - 1")

    def total(self) -> int:
        return int(self.counts.sum())

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    y_std: np.ndarray | None = None
    marks: list[int] | None = None  # annotated steps (e.g. refresh events)

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y, dtype=float)
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have equal length")
        if len(self.x) > 1 and not np.all(np.diff(self.x) > 0):
            raise ValueError("x must be strictly increasing")

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            header = ["x", "y"] + (["y_std"] if self.y_std is not None else [])
            writer.writerow(header)
            for i in range(len(self.x)):
                row = [int(self.x[i]), repr(float(self.y[i]))]
                if self.y_std is not None:
                    row.append(repr(float(self.y_std[i])))
                writer.writerow(row)


def score_distribution(
    run: RunFile,
    teacher: TeacherScores,
    queries,
    top_n: int = 100,
    bins=20,
) -> Histogram:
    """Histogram of teacher scores of the top-n run documents per query,
    pooled over queries."""
    source_map = {q.id: q.source_doc_id for q in queries}
    query_ids: list[str] = []
    source_ids: list[str] = []
    doc_ids: list[str] = []
    for qid in run.query_ids():
        for doc_id, _ in run.hits(qid)[:top_n]:
            query_ids.append(qid)
            source_ids.append(source_map[qid])
            doc_ids.append(doc_id)
    scores = teacher.score_many_by_ids(query_ids, source_ids, doc_ids)
    counts, edges = np.histogram(scores, bins=bins)
    return Histogram(bin_edges=edges, counts=counts, label=f"teacher scores of top-{top_n}")


def ema_smooth(series: Series, window: int = DEFAULT_EMA_WINDOW) -> Series:
    """Exponential moving average with alpha = 2 / (window + 1), seeded at
    the first value."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(series.y) == 0:
        return Series(series.x, series.y, marks=series.marks)
    alpha = 2.0 / (window + 1)
    smoothed = np.empty_like(series.y)
    smoothed[0] = series.y[0]
    for i in range(1, len(series.y)):
        smoothed[i] = alpha * series.y[i] + (1.0 - alpha) * smoothed[i - 1]
    return Series(series.x, smoothed, marks=series.marks)


def negative_relevancy_series(
    train_log: TrainLog,
    teacher: TeacherScores,
    sample_queries: int = 1000,
    top_n: int = 50,
    seed: int = 0,
) -> Series:
    """Mean (+- std) teacher score of sampled queries' top-n pool members
    per remining step; t = 0 is the initial pools."""
    if not train_log.pool_dumps:
        raise ValueError("train log contains no pool dumps")
    dumps = sorted(train_log.pool_dumps, key=lambda d: d.t)
    if dumps[0].t != 0:
        raise ValueError("missing pool dump at step 0")
    dumped_steps = {d.step for d in dumps}
    for event in train_log.refreshes:
        if event.step not in dumped_steps:
            raise ValueError(f"missing pool dump at step {event.step}")

    all_qids = dumps[0].pool.query_ids()
    if len(all_qids) > sample_queries:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(all_qids), size=sample_queries, replace=False)
        qids = [all_qids[i] for i in sorted(chosen)]
    else:
        qids = all_qids

    xs, means, stds = [], [], []
    for dump in dumps:
        query_ids: list[str] = []
        source_ids: list[str] = []
        doc_ids: list[str] = []
        for qid in qids:
            for doc_id in dump.pool.doc_ids(qid)[:top_n]:
                query_ids.append(qid)
                source_ids.append(train_log.source_map[qid])
                doc_ids.append(doc_id)
        scores = teacher.score_many_by_ids(query_ids, source_ids, doc_ids)
        xs.append(dump.t)
        means.append(float(scores.mean()))
        stds.append(float(scores.std()))
    return Series(np.array(xs), np.array(means), y_std=np.array(stds))


def project_embeddings_2d(embeddings: np.ndarray, query_emb: np.ndarray) -> np.ndarray:
    """PCA projection of documents plus the query onto the top-2 variance
    directions; the query is the final row of the result.

    Sign convention: the largest-magnitude coordinate of each axis is made
    positive, so the projection is reproducible bit for bit.
    """
    points = np.vstack([np.atleast_2d(embeddings), np.asarray(query_emb)[None, :]])
    if points.shape[0] < 3:
        raise ValueError("need at least 3 points (documents plus query)")
    if points.shape[1] < 2:
        raise ValueError("need at least 2 input dimensions")
    if len(np.unique(points, axis=0)) < 2:
        raise ValueError("degenerate input: fewer than 2 distinct points")
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:2].T
    for axis in range(2):
        extreme = np.argmax(np.abs(coords[:, axis]))
        if coords[extreme, axis] < 0:
            coords[:, axis] = -coords[:, axis]
    return coords


def margin_series(train_log: TrainLog) -> tuple[Series, Series]:
    """Per-step teacher-margin and loss series with refresh steps marked."""
    steps = np.array([rec.step for rec in train_log.steps])
    margins = np.array([rec.mean_teacher_margin for rec in train_log.steps])
    losses = np.array([rec.loss for rec in train_log.steps])
    marks = [event.step for event in train_log.refreshes]
    return (
        Series(steps, margins, marks=list(marks)),
        Series(steps, losses, marks=list(marks)),
    )


def save_manifest(path, entries: dict) -> None:
    """Write a JSON manifest linking artifacts to config and checkpoints."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")
