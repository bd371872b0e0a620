"""Composite multitask loss: class-weighted cross-entropy plus Lovasz-Softmax per task.

A task whose labels are all no-data is *absent* (``None``) and contributes
exactly zero to the composite loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

NODATA = 255

DEFAULT_LAMBDAS = {
    "bda": (1.0, 0.75),
    "fm": (1.0, 0.5),
    "loc": (1.0, 0.5),
}


@dataclass
class TaskLossConfig:
    lambda_ce: float = 1.0
    lambda_lov: float = 0.5
    class_weights: list[float] | None = None

    def weights(self, n_classes: int) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(n_classes)
        w = np.asarray(self.class_weights, dtype=np.float64)
        if len(w) != n_classes:
            raise ValueError(f"expected {n_classes} class weights, got {len(w)}")
        return w


@dataclass
class LossConfig:
    tasks: dict[str, TaskLossConfig] = field(default_factory=lambda: {
        t: TaskLossConfig(ce, lov) for t, (ce, lov) in DEFAULT_LAMBDAS.items()})

    def to_json(self) -> dict:
        return {t: {"lambda_ce": c.lambda_ce, "lambda_lov": c.lambda_lov,
                    "class_weights": c.class_weights} for t, c in self.tasks.items()}

    @classmethod
    def from_json(cls, obj: dict) -> LossConfig:
        cfg = cls()
        for t, spec in obj.items():
            base = cfg.tasks.get(t, TaskLossConfig())
            lce = float(spec.get("lambda_ce", base.lambda_ce))
            llov = float(spec.get("lambda_lov", base.lambda_lov))
            if lce < 0 or llov < 0:
                raise ValueError(f"{t}: loss weights must be non-negative")
            cfg.tasks[t] = TaskLossConfig(lce, llov, spec.get("class_weights"))
        return cfg


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights ``N / N_k``; classes never observed get weight 0."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 0).any():
        raise ValueError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("class weights need at least one instance")
    w = np.zeros_like(counts)
    seen = counts > 0
    w[seen] = total / counts[seen]
    return w


def _flatten(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"logits {logits.shape} do not match labels {labels.shape}")
    return T.reshape(logits, (-1, K)), labels.reshape(-1).astype(np.int64)


def _valid_index(labels: np.ndarray, w: np.ndarray) -> np.ndarray:
    ok = labels != NODATA
    if (labels[ok] >= len(w)).any() or (labels[ok] < 0).any():
        raise ValueError("label value outside the class range")
    ok[ok] = w[labels[ok]] > 0
    return np.flatnonzero(ok)


def weighted_cross_entropy(logits: Tensor, labels, w=None) -> Tensor | None:
    """``-(1/M_valid) * sum_j w_{y_j} log p_{j, y_j}`` over valid pixels; ``None`` if none are valid."""
    flat, lab = _flatten(logits, labels)
    K = flat.shape[-1]
    w = np.ones(K) if w is None else np.asarray(w, dtype=np.float64)
    idx = _valid_index(lab, w)
    if idx.size == 0:
        return None
    logp = T.log_softmax(T.take(flat, idx, axis=0), axis=-1)
    y = lab[idx]
    picked = T.getitem(logp, (np.arange(idx.size), y))
    wy = Tensor(w[y].astype(flat.dtype))
    return -T.sum_(picked * wy) * (1.0 / idx.size)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss at sorted errors (columns = classes)."""
    gts = gt_sorted.sum(axis=0)
    intersection = gts - np.cumsum(gt_sorted, axis=0)
    union = gts + np.cumsum(1.0 - gt_sorted, axis=0)
    jac = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs: Tensor, labels, w=None) -> Tensor | None:
    """Lovasz-Softmax over classes present in the valid labels, weighted by ``w_c``.

    ``probs`` are per-pixel class probabilities ``(..., K)``. The result is
    ``sum_c w_c * J_c / sum_c w_c`` over present classes, where ``J_c`` is the
    Lovasz extension of ``1 - IoU_c`` at the per-pixel errors.
    """
    flat, lab = _flatten(probs, labels)
    K = flat.shape[-1]
    w = np.ones(K) if w is None else np.asarray(w, dtype=np.float64)
    idx = _valid_index(lab, w)
    if idx.size == 0:
        return None
    p = T.take(flat, idx, axis=0)
    y = lab[idx]
    present = np.unique(y)
    fg = (y[:, None] == present[None, :]).astype(flat.dtype)     # (M, P)
    pc = T.take(p, present, axis=1)
    errors = Tensor(fg) + Tensor(1.0 - 2.0 * fg) * pc               # |fg - p|, since 0 <= p <= 1
    order = np.argsort(-errors.data, axis=0, kind="stable")
    cols = np.broadcast_to(np.arange(len(present)), order.shape)
    e_sorted = T.getitem(errors, (order, cols))
    grad = lovasz_grad(fg[order, cols]).astype(flat.dtype)
    per_class = T.sum_(e_sorted * Tensor(grad), axis=0)
    wp = w[present]
    coef = Tensor((wp / wp.sum()).astype(flat.dtype))
    return T.sum_(per_class * coef)


def task_loss(logits: Tensor, labels, cfg: TaskLossConfig) -> Tensor | None:
    """``lambda_ce * CE + lambda_lov * Lovasz``; ``None`` when the labels carry no valid pixel."""
    K = logits.shape[-1]
    w = cfg.weights(K)
    ce = weighted_cross_entropy(logits, labels, w)
    if ce is None:
        return None
    out = ce * cfg.lambda_ce
    if cfg.lambda_lov:
        lov = lovasz_softmax(T.softmax(logits, axis=-1), labels, w)
        out = out + lov * cfg.lambda_lov
    return out


def composite_loss(outputs: dict[str, Tensor], labels: dict[str, np.ndarray],
                   cfg: LossConfig | None = None) -> tuple[Tensor, dict[str, float | None]]:
    """Sum of present task losses plus a per-task breakdown (``None`` for absent tasks)."""
    cfg = cfg or LossConfig()
    total = None
    parts: dict[str, float | None] = {}
    for task, logits in outputs.items():
        lab = labels.get(task)
        term = None if lab is None else task_loss(logits, lab, cfg.tasks[task])
        parts[task] = None if term is None else term.item()
        if term is not None:
            total = term if total is None else total + term
    if total is None:
        dtype = next(iter(outputs.values())).dtype if outputs else np.float64
        total = Tensor(np.zeros((), dtype=dtype))
    return total, parts
