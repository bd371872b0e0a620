"""Fast analytic and oracle checks runnable from an installed build."""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import ssm
from . import tensor as T
from .damage_map import summarize
from .ffss import rearrange_cross, rearrange_sequential, reverse_cross, reverse_sequential
from .geo import rectangle
from .groundtruth import DamageAssignment, kmeans_1d, knn_impute
from .losses import weighted_cross_entropy
from .metrics import adjacent_f1, f1_per_class, confusion_matrix, upper_adjacent_f1
from .tensor import Tensor
from .vss import cross_merge, cross_scan


def check_zoh():
    d = ssm.discretize_zoh(ssm.ContinuousSsm(np.array([-1.0]), np.array([1.0]), np.array([1.0])), math.log(2.0))
    assert abs(d.A_bar[0] - 0.5) < 1e-12 and abs(d.B_bar[0] - 0.5) < 1e-12


def check_scan_forms():
    rng = np.random.default_rng(0)
    L, D, N = 40, 3, 4
    u = rng.standard_normal((L, D))
    delta = rng.uniform(0.01, 0.5, (L, D))
    A = -rng.uniform(0.5, 2.0, (D, N))
    B = rng.standard_normal((L, N))
    C = rng.standard_normal((L, N))
    ys = [ssm.selective_scan(Tensor(u), Tensor(delta), Tensor(A), Tensor(B), Tensor(C), method=m).data
          for m in ("sequential", "parallel", "fused")]
    assert np.abs(ys[0] - ys[1]).max() < 1e-10 and np.abs(ys[0] - ys[2]).max() < 1e-10


def check_permutations():
    rng = np.random.default_rng(1)
    g = Tensor(rng.standard_normal((3, 4, 5, 2)))
    assert np.array_equal(cross_merge(cross_scan(g), 4, 5).data, 4 * g.data)
    assert np.array_equal(reverse_sequential(rearrange_sequential(g), 3).data, g.data)
    assert np.array_equal(reverse_cross(rearrange_cross(g), 3).data, g.data)


def check_cross_entropy():
    logits = np.array([[2.0, 0.5, -1.0], [0.1, 0.2, 0.3]])
    labels = np.array([0, 2])
    w = np.array([1.0, 2.0, 3.0])
    got = weighted_cross_entropy(Tensor(logits), labels, w).item()
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    want = -(w[0] * logp[0, 0] + w[2] * logp[1, 2]) / 2
    assert abs(got - want) < 1e-12


def check_metrics():
    rng = np.random.default_rng(2)
    gt, pred = rng.integers(0, 4, 300), rng.integers(0, 4, 300)
    _, _, f1 = f1_per_class(confusion_matrix(gt, pred, 4))
    _, _, adj = adjacent_f1(gt, pred, 4)
    _, _, up = upper_adjacent_f1(gt, pred, 4)
    assert (f1 <= up + 1e-15).all() and (up <= adj + 1e-15).all()


def check_aggregation_rules():
    assert summarize(np.array([0, 1, 1, 2, 3])) == 1
    assert summarize(np.array([1, 2])) == 2
    assert summarize(np.array([1, 2]), "mean") == 2
    assert summarize(np.array([1, 1, 3, 3]), "mode") == 3


def check_imputation_arithmetic():
    target = rectangle(0, -1, -1, 1, 1)
    near = rectangle(1, 49, -1, 51, 1)
    far = rectangle(2, -101, -1, -99, 1)
    a = {0: DamageAssignment(0, None, "none"), 1: DamageAssignment(1, 1.0, "direct"),
         2: DamageAssignment(2, 0.25, "direct")}
    out = knn_impute(a, [target, near, far], k=2, d=100.0, k_min=2)
    assert abs(out[0].pde - (2 * 1.0 + 0.25) / 3) < 1e-12


def check_kmeans():
    km = kmeans_1d([0.1] * 5 + [0.5] * 5 + [0.9] * 5, 3)
    assert np.allclose(km.centroids, [0.1, 0.5, 0.9])


def check_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    y = T.sum_(T.silu(x) * T.softmax(x, axis=-1))
    y.backward()
    eps = 1e-6
    fd = np.zeros_like(x.data)
    for idx in itertools.product(range(3), range(4)):
        xp, xm = x.data.copy(), x.data.copy()
        xp[idx] += eps
        xm[idx] -= eps
        f = lambda v: float(np.sum(v / (1 + np.exp(-v)) * np.exp(v) / np.exp(v).sum(-1, keepdims=True)))  # noqa: E731
        fd[idx] = (f(xp) - f(xm)) / (2 * eps)
    assert np.abs(fd - x.grad).max() < 1e-6


CHECKS = [
    ("zoh closed form", check_zoh),
    ("scan forms agree", check_scan_forms),
    ("permutation round trips", check_permutations),
    ("weighted cross-entropy", check_cross_entropy),
    ("metric dominance", check_metrics),
    ("aggregation rules", check_aggregation_rules),
    ("idw imputation", check_imputation_arithmetic),
    ("1-d k-means", check_kmeans),
    ("tape gradient", check_gradient),
]


def run_all(echo=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            fn()
            echo(f"PASS {name}")
        except Exception as exc:  # report every failure, keep going
            ok = False
            echo(f"FAIL {name}: {type(exc).__name__}: {exc}")
    return ok
