"""Per-class, adjacent and upper-adjacent F1 scores for ordinal classes.

All ratios use the 0/0 -> 0 convention. Confusion rows are ground truth,
columns are predictions; no-data (255) instances are ignored.
"""

from __future__ import annotations

import numpy as np

NODATA = 255


def confusion_matrix(gt, pred, K: int) -> np.ndarray:
    gt = np.asarray(gt).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    if gt.shape != pred.shape:
        raise ValueError("gt and pred must have the same number of instances")
    ok = (gt != NODATA) & (pred != NODATA)
    gt, pred = gt[ok], pred[ok]
    if ((gt < 0) | (gt >= K) | (pred < 0) | (pred >= K)).any():
        raise ValueError(f"class ids must lie in [0, {K})")
    return np.bincount(gt * K + pred, minlength=K * K).reshape(K, K)


def _ratio(num, den) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _f1(p, r) -> np.ndarray:
    return _ratio(2.0 * p * r, p + r)


def f1_per_class(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall and F1 per class from a confusion matrix."""
    cm = np.asarray(cm)
    tp = np.diag(cm)
    p = _ratio(tp, cm.sum(axis=0))
    r = _ratio(tp, cm.sum(axis=1))
    return p, r, _f1(p, r)


def harmonic_mean_f1(f1s, exclude=()) -> float:
    """``K' / sum(1/F1_k)`` over non-excluded classes; 0 if any included score is 0."""
    f1s = np.asarray(f1s, dtype=np.float64)
    keep = [k for k in range(len(f1s)) if k not in set(exclude)]
    if not keep:
        raise ValueError("harmonic mean over an empty class set")
    vals = f1s[keep]
    if (vals <= 0).any():
        return 0.0
    return float(len(vals) / np.sum(1.0 / vals))


def _band_f1(cm: np.ndarray, prec_lo: int, prec_hi: int, rec_lo: int, rec_hi: int):
    """F1 where class k is credited for gt in [k+prec_lo, k+prec_hi] (precision)
    and pred in [k+rec_lo, k+rec_hi] (recall)."""
    K = cm.shape[0]
    p = np.zeros(K)
    r = np.zeros(K)
    for k in range(K):
        g = slice(max(0, k + prec_lo), min(K, k + prec_hi + 1))
        q = slice(max(0, k + rec_lo), min(K, k + rec_hi + 1))
        p[k] = _ratio(cm[g, k].sum(), cm[:, k].sum())
        r[k] = _ratio(cm[k, q].sum(), cm[k, :].sum())
    return p, r, _f1(p, r)


def adjacent_f1(gt, pred, K: int):
    """Neighbours on both sides count as correct: gt in {k-1,k,k+1} / pred in {k-1,k,k+1}."""
    return _band_f1(confusion_matrix(gt, pred, K), -1, 1, -1, 1)


def upper_adjacent_f1(gt, pred, K: int):
    """Only over-estimation by one class is credited: gt in {k-1,k} / pred in {k,k+1}."""
    return _band_f1(confusion_matrix(gt, pred, K), -1, 0, 0, 1)


def metric_families(gt, pred, K: int, exclude=(0,)) -> dict:
    """All F1 families with their harmonic means, as plain JSON-ready values."""
    cm = confusion_matrix(gt, pred, K)
    p, r, f1 = f1_per_class(cm)
    _, _, f1_adj = adjacent_f1(gt, pred, K)
    _, _, f1_up = upper_adjacent_f1(gt, pred, K)
    return {
        "n": int(cm.sum()),
        "confusion": cm.tolist(),
        "precision": p.tolist(),
        "recall": r.tolist(),
        "f1": f1.tolist(),
        "f1_hmean": harmonic_mean_f1(f1, exclude),
        "adjacent_f1": f1_adj.tolist(),
        "adjacent_f1_hmean": harmonic_mean_f1(f1_adj, exclude),
        "upper_adjacent_f1": f1_up.tolist(),
        "upper_adjacent_f1_hmean": harmonic_mean_f1(f1_up, exclude),
        "excluded_classes": list(exclude),
    }


def building_level_metrics(records, gt_classes: dict, K: int = 4) -> dict:
    """Metric families over buildings: one instance per record with a predicted class and a GT class.

    ``records`` are damage-map records (``footprint_id``, ``damage_class``);
    ``gt_classes`` maps footprint id to its ground-truth class. Records without
    a predicted class (no coverage) are skipped.
    """
    records = list(records)
    if not records:
        raise ValueError("building-level metrics need at least one record")
    gt, pred = [], []
    for rec in records:
        if rec.damage_class is None or rec.footprint_id not in gt_classes:
            continue
        gt.append(gt_classes[rec.footprint_id])
        pred.append(rec.damage_class)
    if not gt:
        raise ValueError("no record has both a prediction and a ground-truth class")
    return metric_families(np.array(gt), np.array(pred), K, exclude=(0,))
