"""Multiscale category-aware contrastive loss.

Per anchor ``i`` with class ``y_i``::

    w_c[i]  = (1 / n_c[y_i]) * (1 - softmax(y_p[i])[y_i])
    tau     = tau0 * mean_k(1 + n_c[k] / max(n_c))
    S_ij    = cos(x_i, x_j) / tau
    L_scale = -(1/B) * sum_i w_c[i] * sum_{j in P(i)} exp(S_ij) / sum_{k != i} exp(S_ik)

where ``P(i)`` holds the other batch members sharing the anchor's class.
Embeddings are taken at several scales (adaptive average pooling over the
channel axis followed by a linear map) and the per-scale losses averaged.
The sample weights are computed from detached logits; they scale the loss
but carry no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateEmbeddingError, ShapeError
from .rng import Xoshiro256
from .tensor import Tensor, adaptive_avg_pool, as_tensor, log, log_softmax, matmul, sqrt


@dataclass
class ClassStats:
    n_c: np.ndarray
    tau0: float = 0.1

    def __post_init__(self):
        self.n_c = np.asarray(self.n_c, dtype=np.int64)
        if self.n_c.ndim != 1 or self.n_c.size < 2:
            raise ConfigError(f"need counts for at least 2 classes, got {self.n_c.tolist()}")
        if (self.n_c < 1).any():
            raise ConfigError(f"every class needs at least one sample, got {self.n_c.tolist()}")
        if not self.tau0 > 0:
            raise ConfigError(f"tau0 must be positive, got {self.tau0}")

    @property
    def num_classes(self) -> int:
        return int(self.n_c.size)


@dataclass
class ScaleSet:
    scales: list
    proj: list = field(default_factory=list)  # per scale, [E, s]

    def __post_init__(self):
        if not self.scales:
            raise ConfigError("at least one scale is required")
        if any(s < 1 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if len(self.proj) != len(self.scales):
            raise ConfigError(f"{len(self.scales)} scales but {len(self.proj)} projections")

    @classmethod
    def init(cls, scales: Sequence[int], width: int, embed: int, rng: Xoshiro256) -> "ScaleSet":
        scales = [int(s) for s in scales]
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"scales must be strictly increasing, got {scales}")
        if scales and scales[-1] > width:
            raise ConfigError(f"scale {scales[-1]} exceeds embedding width {width}")
        proj = []
        for s in scales:
            bound = 1.0 / math.sqrt(s)
            proj.append(Tensor(rng.uniform_array((embed, s), -bound, bound), requires_grad=True))
        return cls(scales, proj)

    def named_parameters(self, prefix: str = "mccl."):
        return [(f"{prefix}proj_{s}", p) for s, p in zip(self.scales, self.proj)]


def _labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got {labels.tolist()}")
    return labels


def class_weights(stats: ClassStats, y_p, labels) -> Tensor:
    """Per-sample weights ``(1/n_c[y]) * (1 - p(y))``; constant (no gradient)."""
    logits = y_p.data if isinstance(y_p, Tensor) else np.asarray(y_p, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != stats.num_classes:
        raise ShapeError(f"logits {logits.shape} do not match {stats.num_classes} classes")
    labels = _labels(labels, stats.num_classes)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True)
    p_true = probs[np.arange(labels.size), labels]
    return Tensor((1.0 - p_true) / stats.n_c[labels])


def multiscale_project(x_bag: Tensor, scale_set: ScaleSet) -> list:
    """Pool the channel axis to each scale and project to the shared width."""
    width = x_bag.shape[-1]
    out = []
    for s, w in zip(scale_set.scales, scale_set.proj):
        if s > width:
            raise ConfigError(f"scale {s} exceeds embedding width {width}")
        out.append(matmul(adaptive_avg_pool(x_bag, s), w.T))
    return out


def dynamic_temperature(stats: ClassStats) -> float:
    n = stats.n_c.astype(np.float64)
    return float(stats.tau0 * np.mean(1.0 + n / n.max()))


def similarity_matrix(x_s: Tensor, tau: float) -> Tensor:
    """Cosine similarities divided by ``tau``, ``[B, B]``."""
    x_s = as_tensor(x_s)
    norms = sqrt((x_s * x_s).sum(axis=1))
    if norms.data.min() < 1e-12:
        row = int(np.argmin(norms.data))
        raise DegenerateEmbeddingError(f"embedding row {row} has norm {norms.data[row]:.3e}")
    unit = x_s / norms.reshape(-1, 1)
    return matmul(unit, unit.T) * (1.0 / tau)


def contrastive_loss_scale(s_mat: Tensor, labels, w_c: Tensor, log_form: bool = False) -> Tensor:
    """Weighted positive-mass ratio averaged over the batch, negated.

    Anchors without positives contribute zero. ``log_form`` replaces the
    ratio by ``log(ratio)`` for ablations.
    """
    batch = s_mat.shape[0]
    if batch < 2:
        raise ValueError(f"contrastive loss needs a batch of at least 2, got {batch}")
    labels = np.asarray(labels).reshape(-1)
    others = 1.0 - np.eye(batch)
    pos = (labels[:, None] == labels[None, :]) * others
    # ratio is invariant to a per-row shift; use the largest retained entry so
    # the denominator keeps at least one unit term
    shift = np.where(others > 0, s_mat.data, -np.inf).max(axis=1, keepdims=True)
    e = ((s_mat - shift) * others).exp() * others
    ratio = (e * pos).sum(axis=1) / e.sum(axis=1)
    if log_form:
        has_pos = pos.any(axis=1).astype(np.float64)
        terms = log(ratio + (1.0 - has_pos)) * has_pos
    else:
        terms = ratio
    return -(as_tensor(w_c) * terms).sum() * (1.0 / batch)


def mccl_loss(x_bag: Tensor, labels, stats: ClassStats, y_p, scale_set: ScaleSet,
              log_form: bool = False) -> Tensor:
    """Average of the per-scale contrastive losses."""
    tau = dynamic_temperature(stats)
    w_c = class_weights(stats, y_p, labels)
    losses = [contrastive_loss_scale(similarity_matrix(x_s, tau), labels, w_c, log_form)
              for x_s in multiscale_project(x_bag, scale_set)]
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


def cet_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` against integer ``labels``."""
    labels = _labels(labels, logits.shape[1])
    picked = log_softmax(logits, axis=1)[np.arange(labels.size), labels]
    return -picked.mean()


def total_loss(l_mc, l_cet):
    return l_mc + l_cet
