"""MarginMSE distillation loop: GPL (static negatives) and R-GPL.

Each step samples ``batch_size`` training queries with replacement, draws
one hard negative per query uniformly from its pool, and applies one
optimizer update from the mean MarginMSE gradient over the batch. Teacher
margins are computed lazily per sampled (query, negative) pair and cached.

R-GPL additionally rebuilds the dense index with the current parameters
and remines every pool after each step s in {k, 2k, ...} with s <
total_steps (synchronous refresh; training pauses during the rebuild).
With k >= total_steps no refresh ever fires and R-GPL coincides with GPL
bit for bit under equal seeds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, Query, QuerySet
from .dense_index import (
    NegativePool,
    build_index,
    dump_pool_tsv,
    load_pool_tsv,
    mine_hard_negatives,
)
from .encoder import EncoderParams, grad_margin_batch, params_hash
from .teacher import TeacherScores

logger = logging.getLogger(__name__)


@dataclass
class Triplet:
    """One distillation unit: (query, positive doc, negative doc, margin)."""

    query_id: str
    pos_doc_id: str
    neg_doc_id: str
    teacher_margin: float

    def __post_init__(self):
        if self.pos_doc_id == self.neg_doc_id:
            raise ValueError(f"positive and negative coincide for query {self.query_id}")
        if not np.isfinite(self.teacher_margin):
            raise ValueError(f"non-finite teacher margin for query {self.query_id}")


@dataclass
class TrainConfig:
    total_steps: int = 10_000
    batch_size: int = 32
    learning_rate: float = 1e-3
    refresh_interval_k: int = 0  # 0 = never refresh (GPL)
    pool_size: int = 50
    optimizer: str = "adam"  # {"sgd", "adam"}
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # 0 = no eval checkpoints
    log_sampled_triplets: bool = False

    def validate(self) -> None:
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.refresh_interval_k < 0:
            raise ValueError("refresh_interval_k must be >= 0")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")


@dataclass
class StepRecord:
    step: int
    loss: float
    mean_teacher_margin: float
    mean_student_margin: float
    sampled: list[tuple[str, str]] | None = None  # (query_id, neg_doc_id)


@dataclass
class RefreshEvent:
    step: int
    mean_teacher_score: float
    snapshot_hash: str


@dataclass
class PoolDump:
    t: int  # remining ordinal; 0 = initial pools
    step: int
    pool: NegativePool


@dataclass
class EvalCheckpoint:
    step: int
    params_hash: str


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    refreshes: list[RefreshEvent] = field(default_factory=list)
    pool_dumps: list[PoolDump] = field(default_factory=list)
    eval_checkpoints: list[EvalCheckpoint] = field(default_factory=list)
    source_map: dict[str, str] = field(default_factory=dict)

    def save(self, log_dir) -> None:
        """Persist as line-delimited records plus per-dump pool TSVs."""
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        pools_dir = log_dir / "pools"
        pools_dir.mkdir(exist_ok=True)
        with open(log_dir / "log.jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "queries", "source_map": self.source_map}) + "\n")
            for rec in self.steps:
                row = {
                    "type": "step",
                    "step": rec.step,
                    "loss": rec.loss,
                    "mean_teacher_margin": rec.mean_teacher_margin,
                    "mean_student_margin": rec.mean_student_margin,
                }
                if rec.sampled is not None:
                    row["sampled"] = rec.sampled
                fh.write(json.dumps(row) + "\n")
            for ev in self.refreshes:
                fh.write(
                    json.dumps(
                        {
                            "type": "refresh",
                            "step": ev.step,
                            "mean_teacher_score": ev.mean_teacher_score,
                            "snapshot_hash": ev.snapshot_hash,
                        }
                    )
                    + "\n"
                )
            for dump in self.pool_dumps:
                rel = f"pools/pool_t{dump.t:03d}.tsv"
                dump_pool_tsv(dump.pool, log_dir / rel)
                fh.write(
                    json.dumps(
                        {"type": "pool_dump", "t": dump.t, "step": dump.step, "file": rel}
                    )
                    + "\n"
                )
            for ckpt in self.eval_checkpoints:
                fh.write(
                    json.dumps(
                        {"type": "eval", "step": ckpt.step, "params_hash": ckpt.params_hash}
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, log_dir) -> "TrainLog":
        log_dir = Path(log_dir)
        log = cls()
        with open(log_dir / "log.jsonl", encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                kind = row.pop("type")
                if kind == "queries":
                    log.source_map = row["source_map"]
                elif kind == "step":
                    sampled = row.get("sampled")
                    log.steps.append(
                        StepRecord(
                            row["step"],
                            row["loss"],
                            row["mean_teacher_margin"],
                            row["mean_student_margin"],
                            None if sampled is None else [tuple(p) for p in sampled],
                        )
                    )
                elif kind == "refresh":
                    log.refreshes.append(
                        RefreshEvent(row["step"], row["mean_teacher_score"], row["snapshot_hash"])
                    )
                elif kind == "pool_dump":
                    pool = load_pool_tsv(log_dir / row["file"])
                    log.pool_dumps.append(PoolDump(row["t"], row["step"], pool))
                else:
                    raise ValueError(f"unknown log record type {kind!r}")
        return log


def margin_mse_loss(student_margins, teacher_margins) -> float:
    """Mean over the batch of (student - teacher)^2."""
    student = np.asarray(student_margins, dtype=float)
    teacher = np.asarray(teacher_margins, dtype=float)
    if student.shape != teacher.shape or student.ndim != 1 or student.size == 0:
        raise ValueError("margin vectors must be equal-length and non-empty")
    return float(np.mean((student - teacher) ** 2))


class _SgdOptimizer:
    def __init__(self, lr: float):
        self.lr = lr

    def update(self, params: EncoderParams, grads) -> None:
        params.embedding -= self.lr * grads.embedding
        params.projection -= self.lr * grads.projection
        params.bias -= self.lr * grads.bias


class _AdamOptimizer:
    def __init__(self, lr: float, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: EncoderParams, grads) -> None:
        self.t += 1
        for name in ("embedding", "projection", "bias"):
            g = getattr(grads, name)
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            getattr(params, name)[...] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return _SgdOptimizer(config.learning_rate)
    return _AdamOptimizer(
        config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps
    )


class TrainerState:
    """Mutable training state; the trainer owns the parameters exclusively."""

    def __init__(
        self,
        config: TrainConfig,
        params: EncoderParams,
        corpus: Corpus,
        queries: QuerySet,
        teacher: TeacherScores,
        pool: NegativePool,
    ):
        self.config = config
        self.params = params
        self.corpus = corpus
        self.queries = queries
        self.teacher = teacher
        self.pool = pool
        self.optimizer = _make_optimizer(config)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.log = TrainLog(
            source_map={q.id: q.source_doc_id for q in queries}
        )
        self._margin_cache: dict[tuple[str, str], float] = {}
        self._query_list: list[Query] = list(queries)

    def teacher_margin_for(self, query: Query, neg_doc_id: str) -> float:
        key = (query.id, neg_doc_id)
        cached = self._margin_cache.get(key)
        if cached is None:
            cached = self.teacher.margin_by_ids(
                query.id, query.source_doc_id, query.source_doc_id, neg_doc_id
            )
            self._margin_cache[key] = cached
        return cached

    def sample_batch(self) -> list[Triplet]:
        rows = self.rng.integers(0, len(self._query_list), size=self.config.batch_size)
        batch = []
        for row in rows:
            query = self._query_list[int(row)]
            neg_id = self.pool.sample(query.id, self.rng)
            batch.append(
                Triplet(
                    query_id=query.id,
                    pos_doc_id=query.source_doc_id,
                    neg_doc_id=neg_id,
                    teacher_margin=self.teacher_margin_for(query, neg_id),
                )
            )
        return batch


def train_step(state: TrainerState, batch: list[Triplet]) -> StepRecord:
    """One optimizer update from the mean MarginMSE gradient over ``batch``."""
    if not batch:
        raise ValueError("batch must be non-empty")
    corpus_bags = state.corpus.bags()
    query_bags = state.queries.bags()
    q_rows = [state.queries.row_of(t.query_id) for t in batch]
    p_rows = [state.corpus.row_of(t.pos_doc_id) for t in batch]
    n_rows = [state.corpus.row_of(t.neg_doc_id) for t in batch]
    teacher_margins = np.array([t.teacher_margin for t in batch])

    loss, grads, student_margins = grad_margin_batch(
        state.params,
        query_bags[q_rows],
        corpus_bags[p_rows],
        corpus_bags[n_rows],
        teacher_margins,
    )
    state.optimizer.update(state.params, grads)
    state.step += 1
    record = StepRecord(
        step=state.step,
        loss=loss,
        mean_teacher_margin=float(teacher_margins.mean()),
        mean_student_margin=float(student_margins.mean()),
        sampled=(
            [(t.query_id, t.neg_doc_id) for t in batch]
            if state.config.log_sampled_triplets
            else None
        ),
    )
    state.log.steps.append(record)
    return record


def _mean_pool_teacher_score(
    teacher: TeacherScores, pool: NegativePool, source_map: dict[str, str]
) -> float:
    query_ids: list[str] = []
    source_ids: list[str] = []
    doc_ids: list[str] = []
    for qid in pool.query_ids():
        for doc_id in pool.doc_ids(qid):
            query_ids.append(qid)
            source_ids.append(source_map[qid])
            doc_ids.append(doc_id)
    if not doc_ids:
        raise ValueError("cannot score an empty pool")
    return float(teacher.score_many_by_ids(query_ids, source_ids, doc_ids).mean())


def _check_pool_coverage(pool: NegativePool, queries: QuerySet) -> None:
    for query in queries:
        if query.id not in pool:
            raise ValueError(f"no negative pool entry for query {query.id}")
        if not pool.doc_ids(query.id):
            raise ValueError(f"empty negative pool for query {query.id}")


def _run(
    config: TrainConfig,
    params: EncoderParams,
    initial_pool: NegativePool,
    teacher: TeacherScores,
    corpus: Corpus,
    queries: QuerySet,
) -> tuple[EncoderParams, TrainLog]:
    config.validate()
    _check_pool_coverage(initial_pool, queries)
    state = TrainerState(config, params.copy(), corpus, queries, teacher, initial_pool)
    state.log.pool_dumps.append(PoolDump(t=0, step=0, pool=initial_pool))

    k = config.refresh_interval_k
    for step in range(1, config.total_steps + 1):
        train_step(state, state.sample_batch())
        if config.eval_every and step % config.eval_every == 0:
            state.log.eval_checkpoints.append(EvalCheckpoint(step, params_hash(state.params)))
        if k and step % k == 0 and step < config.total_steps:
            index = build_index(state.params, corpus, step)
            state.pool = mine_hard_negatives(index, queries, state.params, config.pool_size)
            mean_score = _mean_pool_teacher_score(teacher, state.pool, state.log.source_map)
            state.log.refreshes.append(
                RefreshEvent(step, mean_score, index.snapshot_hash())
            )
            state.log.pool_dumps.append(
                PoolDump(t=len(state.log.refreshes), step=step, pool=state.pool)
            )
            logger.info(
                "refreshed pools at step %d: mean teacher score %.4f", step, mean_score
            )
    return state.params, state.log


def run_gpl(
    config: TrainConfig,
    params: EncoderParams,
    initial_pool: NegativePool,
    teacher: TeacherScores,
    corpus: Corpus,
    queries: QuerySet,
) -> tuple[EncoderParams, TrainLog]:
    """GPL: negatives drawn from ``initial_pool`` for the whole run."""
    if config.refresh_interval_k != 0:
        raise ValueError("run_gpl requires refresh_interval_k = 0")
    return _run(config, params, initial_pool, teacher, corpus, queries)


def run_rgpl(
    config: TrainConfig,
    params: EncoderParams,
    initial_pool: NegativePool,
    teacher: TeacherScores,
    corpus: Corpus,
    queries: QuerySet,
) -> tuple[EncoderParams, TrainLog]:
    """R-GPL: pools remined with the adapting model every k steps."""
    if config.refresh_interval_k <= 0:
        raise ValueError("run_rgpl requires refresh_interval_k > 0")
    return _run(config, params, initial_pool, teacher, corpus, queries)
