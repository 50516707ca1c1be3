"""Trainable bi-encoder: embedding table, mean pooling, affine projection.

One shared parameter set encodes both queries and documents. The hidden
state of token i is its embedding row; the passage representation is the
mean over non-special tokens pushed through a single affine projection.
A sequence with zero non-special tokens pools to the zero vector, so its
encoding is exactly the projection bias.

Mean pooling is order-invariant, so sequences are carried internally as
row-normalized token-count vectors ("bags"); encoding a batch is then two
matrix products. All numerics are double precision.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix

from .data import TokenSeq

CHECKPOINT_MAGIC = b"RGPLCK01"


@dataclass
class EncoderParams:
    embedding: np.ndarray  # (vocab_size, hidden_dim)
    projection: np.ndarray  # (hidden_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]

    def validate(self) -> None:
        if self.embedding.ndim != 2 or self.projection.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("parameter tensors have wrong rank")
        if self.projection.shape[0] != self.hidden_dim:
            raise ValueError("projection rows must match hidden_dim")
        if self.bias.shape[0] != self.out_dim:
            raise ValueError("bias length must match out_dim")
        for name in ("embedding", "projection", "bias"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.embedding.copy(), self.projection.copy(), self.bias.copy(), self.seed
        )


@dataclass
class EncoderGrads:
    embedding: np.ndarray
    projection: np.ndarray
    bias: np.ndarray


def init_params(vocab_size: int, hidden_dim: int, out_dim: int, seed: int) -> EncoderParams:
    """Zero-mean init with scale 1/sqrt(hidden_dim); embedding row norms
    concentrate near 1. Bias starts at zero."""
    if vocab_size < 1 or hidden_dim < 1 or out_dim < 1:
        raise ValueError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(hidden_dim)
    return EncoderParams(
        embedding=rng.normal(0.0, scale, size=(vocab_size, hidden_dim)),
        projection=rng.normal(0.0, scale, size=(hidden_dim, out_dim)),
        bias=np.zeros(out_dim),
        seed=seed,
    )


def _check_ids(ids: np.ndarray, vocab_size: int) -> None:
    if len(ids) == 0:
        return
    bad = ids[(ids < 0) | (ids >= vocab_size)]
    if len(bad):
        raise ValueError(f"token id {int(bad[0])} out of range for vocab size {vocab_size}")


def bag_of_ids(content_ids: np.ndarray, vocab_size: int) -> csr_matrix:
    """1 x vocab_size row of mean-pooling weights (count / length)."""
    _check_ids(np.asarray(content_ids), vocab_size)
    uniq, counts = np.unique(content_ids, return_counts=True)
    data = counts / max(len(content_ids), 1)
    return csr_matrix((data, uniq, [0, len(uniq)]), shape=(1, vocab_size))


def encode_bags(params: EncoderParams, bags: csr_matrix) -> np.ndarray:
    """Encode a batch of bag rows: (bags @ embedding) @ projection + bias."""
    if bags.shape[1] != params.vocab_size:
        raise ValueError(
            f"bag width {bags.shape[1]} does not match vocab size {params.vocab_size}"
        )
    pooled = bags @ params.embedding
    return pooled @ params.projection + params.bias


def encode(params: EncoderParams, seq: TokenSeq) -> np.ndarray:
    """Encode one token sequence to an out_dim vector."""
    bag = bag_of_ids(seq.content_ids(), params.vocab_size)
    return encode_bags(params, bag)[0]


def score(q_emb: np.ndarray, d_emb: np.ndarray) -> float:
    """Relevance score: dot product of the two embeddings."""
    q_emb = np.asarray(q_emb)
    d_emb = np.asarray(d_emb)
    if q_emb.shape != d_emb.shape:
        raise ValueError(f"dimension mismatch: {q_emb.shape} vs {d_emb.shape}")
    return float(np.dot(q_emb, d_emb))


def grad_margin_batch(
    params: EncoderParams,
    query_bags: csr_matrix,
    pos_bags: csr_matrix,
    neg_bags: csr_matrix,
    teacher_margins: np.ndarray,
) -> tuple[float, EncoderGrads, np.ndarray]:
    """Batch MarginMSE loss and analytic gradients.

    loss = mean_i (q_i . (p_i - n_i) - t_i)^2 over the batch. Returns the
    loss, gradients for every parameter tensor, and the per-item student
    margins. Parameters are not modified.
    """
    teacher_margins = np.asarray(teacher_margins, dtype=float)
    batch = teacher_margins.shape[0]

    pooled_q = query_bags @ params.embedding
    pooled_p = pos_bags @ params.embedding
    pooled_n = neg_bags @ params.embedding
    emb_q = pooled_q @ params.projection + params.bias
    emb_p = pooled_p @ params.projection + params.bias
    emb_n = pooled_n @ params.projection + params.bias

    diff = emb_p - emb_n
    student_margins = np.einsum("ij,ij->i", emb_q, diff)
    residual = student_margins - teacher_margins
    loss = float(np.mean(residual**2))

    coeff = (2.0 / batch) * residual
    d_emb_q = coeff[:, None] * diff
    d_emb_p = coeff[:, None] * emb_q
    d_emb_n = -d_emb_p

    d_projection = pooled_q.T @ d_emb_q + pooled_p.T @ d_emb_p + pooled_n.T @ d_emb_n
    d_bias = d_emb_q.sum(axis=0) + d_emb_p.sum(axis=0) + d_emb_n.sum(axis=0)

    pt = params.projection.T
    d_embedding = (
        query_bags.T @ (d_emb_q @ pt)
        + pos_bags.T @ (d_emb_p @ pt)
        + neg_bags.T @ (d_emb_n @ pt)
    )
    grads = EncoderGrads(np.asarray(d_embedding), np.asarray(d_projection), d_bias)
    return loss, grads, student_margins


def grad_triplet(
    params: EncoderParams,
    query: TokenSeq,
    positive: TokenSeq,
    negative: TokenSeq,
    teacher_margin: float,
) -> tuple[float, EncoderGrads]:
    """Loss and gradients of (DR(q,pos) - DR(q,neg) - teacher_margin)^2."""
    v = params.vocab_size
    loss, grads, _ = grad_margin_batch(
        params,
        bag_of_ids(query.content_ids(), v),
        bag_of_ids(positive.content_ids(), v),
        bag_of_ids(negative.content_ids(), v),
        np.array([teacher_margin]),
    )
    return loss, grads


def params_hash(params: EncoderParams) -> str:
    """Content hash of the parameter tensors (dims + row-major bytes)."""
    h = hashlib.sha256()
    h.update(struct.pack("<QQQ", params.vocab_size, params.hidden_dim, params.out_dim))
    h.update(np.ascontiguousarray(params.embedding).tobytes())
    h.update(np.ascontiguousarray(params.projection).tobytes())
    h.update(np.ascontiguousarray(params.bias).tobytes())
    return h.hexdigest()


def save_checkpoint(params: EncoderParams, path, step: int = 0) -> None:
    """Write the documented binary layout plus a JSON manifest.

    Layout: magic (8 bytes), vocab/hidden/out dims, seed, step (all u64
    little-endian), then row-major float64 embedding, projection, bias.
    The manifest is written next to the checkpoint as ``<path>.json``.
    """
    path = Path(path)
    header = CHECKPOINT_MAGIC + struct.pack(
        "<QQQQQ",
        params.vocab_size,
        params.hidden_dim,
        params.out_dim,
        params.seed & 0xFFFFFFFFFFFFFFFF,
        step,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(params.embedding).tobytes())
        fh.write(np.ascontiguousarray(params.projection).tobytes())
        fh.write(np.ascontiguousarray(params.bias).tobytes())
    manifest = {
        "format": CHECKPOINT_MAGIC.decode(),
        "vocab_size": params.vocab_size,
        "hidden_dim": params.hidden_dim,
        "out_dim": params.out_dim,
        "seed": params.seed,
        "step": step,
        "params_sha256": params_hash(params),
    }
    with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    """Read a checkpoint; returns (params, header metadata)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        vocab, hidden, out, seed, step = struct.unpack("<QQQQQ", fh.read(40))
        embedding = np.frombuffer(fh.read(vocab * hidden * 8), dtype=np.float64).reshape(
            vocab, hidden
        )
        projection = np.frombuffer(fh.read(hidden * out * 8), dtype=np.float64).reshape(
            hidden, out
        )
        bias = np.frombuffer(fh.read(out * 8), dtype=np.float64)
    params = EncoderParams(embedding.copy(), projection.copy(), bias.copy(), seed=seed)
    params.validate()
    return params, {"seed": seed, "step": step}
