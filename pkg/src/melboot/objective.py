"""Composite training objective and the external-embedding interface.

Three parts: a masked patch-prediction loss against teacher latents, a
global CLS loss against the teacher's layer-averaged CLS, and an alignment
loss pulling one student layer's CLS (through a single linear head) toward
a frozen external encoder's clip embedding. All reductions are means so the
loss weights transfer across configuration sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DimensionError, ParamSet, Tensor

OBJECTIVES = ("mse", "ce", "l1", "cosine")

EMBED_MAGIC = b"MELEMB1\n"


class DivergenceError(FloatingPointError):
    """A loss component went NaN/Inf; training cannot continue."""


class EmbeddingLookupError(KeyError):
    """Clip id missing from a file-backed embedding table."""


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    align_layer: int = 1  # 1-based student block index fed to the align head
    objective: str = "mse"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.align_layer < 1:
            raise ValueError("align_layer is 1-based")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")


@dataclass
class LossBreakdown:
    loss_p: float
    loss_g: float
    loss_r: float
    total: float
    lambda1: float
    lambda2: float


@dataclass
class TargetEmbedding:
    vector: np.ndarray
    source_id: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise DivergenceError(f"non-finite target embedding from {self.source_id}")


def init_align_head(hidden: int, target_dim: int, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    """Single linear map from encoder width to the external embedding dim."""
    std = 1.0 / np.sqrt(hidden)
    return ParamSet(
        {
            "w": Tensor(rng.normal(0.0, std, size=(hidden, target_dim)), requires_grad=True, dtype=dtype),
            "b": Tensor(np.zeros(target_dim), requires_grad=True, dtype=dtype),
        }
    )


# ----------------------------------------------------------------------
# loss components (tape scalars)


def patch_loss(y_hat: Tensor, y: np.ndarray, mask_flat: np.ndarray) -> Tensor:
    """Mean squared error over masked positions only."""
    if y_hat.shape != y.shape:
        raise DimensionError(f"prediction {y_hat.shape} vs target {y.shape}")
    idx = np.flatnonzero(mask_flat)
    if idx.size == 0:
        raise ValueError("patch loss needs at least one masked position")
    diff = T.take(y_hat, idx) - Tensor(y[idx], dtype=y_hat.dtype)
    return (diff * diff).mean()


def global_loss(cls_student: Tensor, cls_teacher_mean: np.ndarray) -> Tensor:
    if cls_student.shape != cls_teacher_mean.shape:
        raise DimensionError(f"CLS dims differ: {cls_student.shape} vs {cls_teacher_mean.shape}")
    diff = cls_student - Tensor(cls_teacher_mean, dtype=cls_student.dtype)
    return (diff * diff).mean()


def align_forward(cls_at_d: Tensor, head: ParamSet) -> Tensor:
    dim = cls_at_d.shape[0]
    out = T.reshape(cls_at_d, (1, dim)) @ head["w"] + head["b"]
    return T.reshape(out, (out.shape[1],))


def repr_loss(cls_at_d: Tensor, head: ParamSet, target: TargetEmbedding, objective: str = "mse") -> Tensor:
    """Alignment loss between the projected student CLS and the external
    embedding, under the configured objective.

    `ce` treats both vectors as logits of distributions over feature dims
    (softmax cross-entropy), since plain cross-entropy is undefined on
    continuous targets.
    """
    h = align_forward(cls_at_d, head)
    t = np.asarray(target.vector, dtype=h.dtype)
    if h.shape != t.shape:
        raise DimensionError(f"align head output {h.shape} vs target {t.shape}")
    if objective == "mse":
        diff = h - Tensor(t)
        return (diff * diff).mean()
    if objective == "l1":
        return T.tabs(h - Tensor(t)).mean()
    if objective == "cosine":
        t_norm = float(np.linalg.norm(t))
        if t_norm == 0.0:
            raise ValueError("cosine objective undefined for a zero-norm target")
        h_norm = T.tsqrt((h * h).sum())
        if float(h_norm.data) == 0.0:
            raise ValueError("cosine objective undefined for a zero-norm projection")
        cos = (h * Tensor(t)).sum() / (h_norm * t_norm)
        return 1.0 - cos
    if objective == "ce":
        q = np.exp(t - t.max())
        q = q / q.sum()
        return T.logsumexp(h, axis=-1) - (h * Tensor(q)).sum()
    raise ValueError(f"unknown objective {objective!r}")


def total_loss(loss_p: Tensor, loss_g: Tensor, loss_r: Tensor, weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum on the tape plus a float breakdown for logging.

    The breakdown satisfies total == loss_p + lambda1*loss_g + lambda2*loss_r
    exactly (identical f64 expression).
    """
    p, g, r = loss_p.item(), loss_g.item(), loss_r.item()
    if not (np.isfinite(p) and np.isfinite(g) and np.isfinite(r)):
        raise DivergenceError(f"non-finite loss components: p={p}, g={g}, r={r}")
    tape_total = loss_p + weights.lambda1 * loss_g + weights.lambda2 * loss_r
    breakdown = LossBreakdown(
        loss_p=p,
        loss_g=g,
        loss_r=r,
        total=p + weights.lambda1 * g + weights.lambda2 * r,
        lambda1=weights.lambda1,
        lambda2=weights.lambda2,
    )
    return tape_total, breakdown


# ----------------------------------------------------------------------
# external encoders


class SyntheticOracleEncoder:
    """Frozen stand-in for a pretrained clip encoder: a fixed seeded linear
    projection of the time-averaged spectrogram."""

    def __init__(self, seed: int, target_dim: int, n_mels: int):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xE0C,)))
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(n_mels), size=(n_mels, target_dim))
        self.bias = rng.normal(0.0, 0.1, size=target_dim)
        self.target_dim = target_dim
        self.source_id = f"synthetic-oracle(seed={seed},dim={target_dim})"

    def embed(self, clip_id: str, spec_data: np.ndarray) -> np.ndarray:
        if spec_data.ndim != 2 or spec_data.shape[1] != self.weight.shape[0]:
            raise DimensionError(f"expected [T, {self.weight.shape[0]}] spectrogram, got {spec_data.shape}")
        pooled = np.asarray(spec_data, dtype=np.float64).mean(axis=0)
        return pooled @ self.weight + self.bias


class FileBackedEncoder:
    """Embedding lookup table loaded from the documented binary format."""

    def __init__(self, path):
        self.table, self.source_id = read_embeddings(path)
        dims = {v.size for v in self.table.values()}
        if len(dims) > 1:
            raise ValueError(f"{path}: inconsistent embedding dims {sorted(dims)}")
        self.target_dim = dims.pop() if dims else 0

    def embed(self, clip_id: str, spec_data: np.ndarray) -> np.ndarray:
        try:
            return self.table[clip_id]
        except KeyError:
            raise EmbeddingLookupError(f"clip id {clip_id!r} not present in embedding file") from None


def external_embed(encoder, clip_id: str, spec_data: np.ndarray) -> TargetEmbedding:
    return TargetEmbedding(vector=encoder.embed(clip_id, spec_data), source_id=encoder.source_id)


# ----------------------------------------------------------------------
# embedding file format
#
# ASCII index header, then a raw payload of little-endian f32 values:
#
#   MELEMB1\n
#   source=<source id>\n
#   count=<n>\n
#   <clip_id> <dim> <byte offset into payload>\n   (n lines)
#   END\n
#   <payload bytes>
#
# Clip ids must be non-empty and free of whitespace.


def write_embeddings(path, records: list[tuple[str, np.ndarray]], source_id: str):
    if not records:
        raise ValueError("refusing to write an empty embedding file")
    if "\n" in source_id:
        raise ValueError("source id must be a single line")
    header = [EMBED_MAGIC.decode().rstrip("\n"), f"source={source_id}", f"count={len(records)}"]
    payload = bytearray()
    for clip_id, vec in records:
        if not clip_id or any(c.isspace() for c in clip_id):
            raise ValueError(f"bad clip id {clip_id!r}")
        arr = np.asarray(vec, dtype="<f4")
        header.append(f"{clip_id} {arr.size} {len(payload)}")
        payload.extend(arr.tobytes())
    header.append("END")
    Path(path).write_bytes("\n".join(header).encode() + b"\n" + bytes(payload))


def read_embeddings(path) -> tuple[dict[str, np.ndarray], str]:
    blob = Path(path).read_bytes()
    if not blob.startswith(EMBED_MAGIC):
        raise ValueError(f"{path}: not an embedding file (bad magic)")
    try:
        end = blob.index(b"\nEND\n", len(EMBED_MAGIC) - 1)
    except ValueError:
        raise ValueError(f"{path}: missing END marker") from None
    lines = blob[:end].decode().splitlines()
    payload = blob[end + len(b"\nEND\n") :]
    source = lines[1].removeprefix("source=")
    count = int(lines[2].removeprefix("count="))
    entries = lines[3 : 3 + count]
    if len(entries) != count:
        raise ValueError(f"{path}: header promises {count} records, found {len(entries)}")
    table: dict[str, np.ndarray] = {}
    for entry in entries:
        clip_id, dim_s, off_s = entry.split(" ")
        dim, off = int(dim_s), int(off_s)
        vec = np.frombuffer(payload, dtype="<f4", count=dim, offset=off)
        table[clip_id] = vec.astype(np.float64)
    return table, source
