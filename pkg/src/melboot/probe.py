"""Frozen-encoder linear probe and ranking metrics.

The probe trains a single softmax layer on CLS features with full-batch
gradient descent; encoder weights are never touched. Evaluation reports
top-1 accuracy and mean average precision with stable-order tie breaking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bootstrap import student_forward
from .encoder import ResolutionSpec
from .rng import make_rng
from .tensor import ParamSet, Tensor, no_grad
from .transformer import final_norm


@dataclass
class ProbeHead:
    weight: np.ndarray  # [D, n_classes]
    bias: np.ndarray  # [n_classes]

    def scores(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(features), axis=1)


@dataclass
class EvalReport:
    accuracy: float
    m_ap: float
    per_class_ap: list  # None for classes skipped for lack of positives
    n_samples: int
    skipped_classes: list = field(default_factory=list)

    def lines(self, class_names=None) -> list[str]:
        def cname(i):
            return class_names[i] if class_names else str(i)

        out = [f"accuracy={self.accuracy:.6f}", f"map={self.m_ap:.6f}", f"n_samples={self.n_samples}"]
        for i, ap in enumerate(self.per_class_ap):
            out.append(f"ap.{cname(i)}={'nan' if ap is None else f'{ap:.6f}'}")
        if self.skipped_classes:
            out.append("skipped_classes=" + ",".join(cname(i) for i in self.skipped_classes))
        return out


def encode_clip(
    encoder: ParamSet, res: ResolutionSpec, n_layers: int, heads: int, spec: Tensor
) -> np.ndarray:
    """Deterministic clip feature: CLS of the final (unmasked) encoder output."""
    with no_grad():
        _, states = student_forward(encoder, res, n_layers, heads, spec, mask=None)
        out = final_norm(encoder.subset("tf."), states[-1])
    return out.data[0].copy()


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    epochs: int = 200,
    lr: float = 0.5,
    seed: int = 0,
) -> ProbeHead:
    """Full-batch softmax-CE gradient descent on standardized features; the
    standardization is folded back into the returned affine head."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n, dim = features.shape
    if np.unique(labels).size < 2:
        raise ValueError("probe training needs at least two classes present")
    if n_classes < 2 or labels.max() >= n_classes:
        raise ValueError("labels exceed n_classes")

    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd[sd < 1e-12] = 1.0
    x = (features - mu) / sd
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0

    rng = make_rng(seed, "probe")
    w = rng.normal(0.0, 0.01, size=(dim, n_classes))
    b = np.zeros(n_classes)
    for _ in range(epochs):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        gl = (p - onehot) / n
        w -= lr * (x.T @ gl)
        b -= lr * gl.sum(axis=0)

    folded_w = w / sd[:, None]
    folded_b = b - (mu / sd) @ w
    return ProbeHead(weight=folded_w, bias=folded_b)


def accuracy(head: ProbeHead, features: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(head.predict(np.asarray(features, dtype=np.float64)) == labels))


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> EvalReport:
    """Per-class average precision over a score-descending ranking (ties in
    stable index order); mAP is the unweighted mean over classes that have at
    least one positive. Classes without positives are skipped and reported.

    Accuracy here is the top-1 hit rate (argmax score lands on a positive).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.ndim != 2 or scores.size == 0:
        raise ValueError("scores must be a non-empty [n, classes] array")
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} vs labels {labels.shape}")
    n, n_classes = scores.shape

    per_class: list = []
    skipped = []
    for c in range(n_classes):
        positives = labels[:, c]
        if not positives.any():
            per_class.append(None)
            skipped.append(c)
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        ranked = positives[order]
        hits = np.cumsum(ranked)
        precision = hits / np.arange(1, n + 1)
        per_class.append(float(precision[ranked].mean()))

    aps = [ap for ap in per_class if ap is not None]
    if not aps:
        raise ValueError("no class has a positive example")
    top1 = scores.argmax(axis=1)
    acc = float(np.mean(labels[np.arange(n), top1]))
    return EvalReport(
        accuracy=acc,
        m_ap=float(np.mean(aps)),
        per_class_ap=per_class,
        n_samples=n,
        skipped_classes=skipped,
    )


def split_indices(labels: np.ndarray, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic stratified split; every class contributes to both sides."""
    labels = np.asarray(labels)
    rng = make_rng(seed, "split")
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = max(1, min(idx.size - 1, int(round(train_fraction * idx.size))))
        train.extend(idx[:k])
        test.extend(idx[k:])
    return np.sort(np.asarray(train, dtype=np.intp)), np.sort(np.asarray(test, dtype=np.intp))
