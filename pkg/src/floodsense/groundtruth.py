"""Building-level damage labels from PDE points.

Pipeline: spatial join -> capped nearest assignment -> single-pass kNN
imputation -> 1-D k-means binning into classes 1..3 -> label rasters.
Footprints without any PDE end as class 0 (no damage).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .geo import NODATA, Footprint, GridIndex, GridSpec, footprint_pixels

SOURCES = ("direct", "nearest", "imputed", "none")


@dataclass(frozen=True)
class PdePoints:
    """Columnar PDE point set: ids, planar coordinates (m) and damage extent in [0, 1]."""

    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    pde: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.x) == len(self.y) == len(self.pde) == n):
            raise ValueError("point columns differ in length")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise ValueError("point coordinates must be finite")
        if ((self.pde < 0) | (self.pde > 1) | ~np.isfinite(self.pde)).any():
            raise ValueError("pde values must lie in [0, 1]")

    @classmethod
    def from_arrays(cls, x, y, pde, ids=None) -> PdePoints:
        x = np.asarray(x, dtype=np.float64)
        ids = np.arange(len(x)) if ids is None else np.asarray(ids, dtype=np.int64)
        return cls(ids, x, np.asarray(y, dtype=np.float64), np.asarray(pde, dtype=np.float64))

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class DamageAssignment:
    footprint_id: int
    pde: float | None
    source: str
    damage_class: int = 0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == "none" and (self.pde is not None or self.damage_class != 0):
            raise ValueError("an unassigned footprint carries no pde and class 0")
        if self.damage_class in (1, 2, 3) and self.pde is None:
            raise ValueError("damaged classes need a pde value")


@dataclass(frozen=True)
class ImputeConfig:
    k: int = 5
    d: float = 100.0
    k_min: int = 5
    d_max: float = 100.0
    n_classes: int = 3

    def __post_init__(self):
        if self.k < 1 or self.k_min < 1 or not self.d > 0 or not self.d_max > 0:
            raise ValueError(f"imputation parameters must be positive: {self}")


def _centroids(footprints) -> np.ndarray:
    return np.array([fp.centroid for fp in footprints], dtype=np.float64).reshape(-1, 2)


def spatial_join(points: PdePoints, footprints: list[Footprint]) -> dict[int, DamageAssignment]:
    """Direct assignments: mean PDE of the points inside each footprint."""
    out = {}
    index = GridIndex(points.x, points.y, cell=50.0)
    for fp in footprints:
        fp.validate()
        cand = index.candidates(*fp.bbox)
        if cand.size:
            inside = cand[fp.contains(points.x[cand], points.y[cand])]
            if inside.size:
                out[fp.id] = DamageAssignment(fp.id, float(np.mean(points.pde[inside])), "direct")
                continue
        out[fp.id] = DamageAssignment(fp.id, None, "none")
    return out


def nearest_assign(assignments: dict[int, DamageAssignment], footprints, points: PdePoints,
                   d_max: float = 100.0) -> dict[int, DamageAssignment]:
    """Unassigned footprints take the closest point within ``d_max`` of their centroid.

    Ties go to the lower point index. Points may serve several footprints.
    """
    out = dict(assignments)
    index = GridIndex(points.x, points.y, cell=d_max)
    for fp in footprints:
        if out[fp.id].source != "none":
            continue
        cx, cy = fp.centroid
        idx, _ = index.within(cx, cy, d_max)
        if idx.size:
            out[fp.id] = DamageAssignment(fp.id, float(points.pde[idx[0]]), "nearest")
    return out


def knn_impute(assignments: dict[int, DamageAssignment], footprints, k: int = 5, d: float = 100.0,
               k_min: int = 5) -> dict[int, DamageAssignment]:
    """Single-pass inverse-distance kNN over direct/nearest seeds (weights ``1/max(dist, 1)``)."""
    if k < 1 or k_min < 1 or not d > 0:
        raise ValueError("k, k_min and d must be positive")
    out = dict(assignments)
    seeds = [fp for fp in footprints if assignments[fp.id].source in ("direct", "nearest")]
    if not seeds:
        return out
    sc = _centroids(seeds)
    spde = np.array([assignments[fp.id].pde for fp in seeds])
    index = GridIndex(sc[:, 0], sc[:, 1], cell=d)
    for fp in footprints:
        if assignments[fp.id].source != "none":
            continue
        cx, cy = fp.centroid
        idx, dist = index.within(cx, cy, d)
        if idx.size < k_min:
            continue
        w = 1.0 / np.maximum(dist[:k], 1.0)
        out[fp.id] = DamageAssignment(fp.id, float(np.sum(w * spde[idx[:k]]) / np.sum(w)), "imputed")
    return out


@dataclass(frozen=True)
class KMeans1D:
    centroids: np.ndarray     # ascending
    breakpoints: np.ndarray   # midpoints between adjacent centroids
    wcss: float

    def classify(self, values) -> np.ndarray:
        """Class 1..K by nearest centroid (ties at a breakpoint go to the higher class)."""
        return 1 + np.searchsorted(self.breakpoints, np.asarray(values, dtype=np.float64), side="right")


def _dp_kmeans(v: np.ndarray, K: int) -> tuple[np.ndarray, float]:
    """Exact 1-D k-means on sorted ``v``; returns cluster start indices and optimal WCSS."""
    n = len(v)
    s1 = np.concatenate([[0.0], np.cumsum(v)])
    s2 = np.concatenate([[0.0], np.cumsum(v * v)])

    def cost(j, i):   # SSE of v[j:i], vectorized over j
        m = i - j
        s = s1[i] - s1[j]
        return np.maximum((s2[i] - s2[j]) - s * s / np.where(m > 0, m, 1), 0.0)

    D = np.full((K + 1, n + 1), np.inf)
    arg = np.zeros((K + 1, n + 1), dtype=np.int64)
    D[0, 0] = 0.0
    for kk in range(1, K + 1):
        for i in range(kk, n + 1):
            j = np.arange(kk - 1, i)
            c = D[kk - 1, j] + cost(j, i)
            a = int(np.argmin(c))
            D[kk, i] = c[a]
            arg[kk, i] = j[a]
    starts = []
    i = n
    for kk in range(K, 0, -1):
        j = arg[kk, i]
        starts.append(j)
        i = j
    return np.array(starts[::-1]), float(D[K, n])


def kmeans_1d(values, K: int = 3) -> KMeans1D:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if len(np.unique(v)) < K:
        raise ValueError(f"k-means with K={K} needs at least {K} distinct values")
    starts, wcss = _dp_kmeans(v, K)
    ends = list(starts[1:]) + [len(v)]
    cents = np.array([v[a:b].mean() for a, b in zip(starts, ends)])
    return KMeans1D(cents, (cents[1:] + cents[:-1]) / 2.0, wcss)


def elbow_wcss(values, k_max: int = 8) -> list[float]:
    """Optimal WCSS for K = 1..k_max (capped by the number of distinct values)."""
    v = np.asarray(values, dtype=np.float64)
    top = min(k_max, len(np.unique(v)))
    return [kmeans_1d(v, K).wcss for K in range(1, top + 1)]


def elbow_k(wcss: list[float]) -> int:
    """K at the point of maximum distance from the line joining the curve's endpoints."""
    if len(wcss) < 3:
        return len(wcss)
    ks = np.arange(1, len(wcss) + 1, dtype=np.float64)
    w = np.asarray(wcss)
    p0, p1 = np.array([ks[0], w[0]]), np.array([ks[-1], w[-1]])
    dirn = (p1 - p0) / np.linalg.norm(p1 - p0)
    rel = np.stack([ks, w], axis=1) - p0
    dist = np.abs(rel[:, 0] * dirn[1] - rel[:, 1] * dirn[0])
    return int(ks[np.argmax(dist)])


def assign_classes(assignments: dict[int, DamageAssignment], n_classes: int = 3):
    """Bin every assigned PDE with one shared k-means fit; unassigned stay class 0."""
    vals = [a.pde for a in assignments.values() if a.source != "none"]
    km = kmeans_1d(vals, n_classes)
    out = {}
    for fid, a in assignments.items():
        cls = 0 if a.source == "none" else int(km.classify([a.pde])[0])
        out[fid] = replace(a, damage_class=cls)
    return out, km


def build_ground_truth(points: PdePoints, footprints: list[Footprint], cfg: ImputeConfig | None = None):
    """Full labelling pipeline; returns ``(assignments, kmeans)``."""
    cfg = cfg or ImputeConfig()
    a = spatial_join(points, footprints)
    a = nearest_assign(a, footprints, points, cfg.d_max)
    a = knn_impute(a, footprints, cfg.k, cfg.d, cfg.k_min)
    return assign_classes(a, cfg.n_classes)


def rasterize_labels(assignments: dict[int, DamageAssignment] | dict[int, int], footprints,
                     grid: GridSpec, task: str = "bda") -> np.ndarray:
    """BDA: building pixels carry class 0..3, background 255. LOC: building 1, background 0."""
    if task not in ("bda", "loc"):
        raise ValueError(f"unknown label task {task!r}")
    out = np.full((grid.height, grid.width), NODATA if task == "bda" else 0, dtype=np.uint8)
    for fp in sorted(footprints, key=lambda f: f.id):
        rr, cc = footprint_pixels(fp, grid)
        if task == "loc":
            out[rr, cc] = 1
        else:
            a = assignments[fp.id]
            out[rr, cc] = a if isinstance(a, (int, np.integer)) else a.damage_class
    return out


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def read_points_csv(path) -> PdePoints:
    ids, xs, ys, pdes = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "x", "y", "pde"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ids.append(int(row["id"]))
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
            pdes.append(float(row["pde"]))
    return PdePoints.from_arrays(xs, ys, pdes, ids)


def write_points_csv(points: PdePoints, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "pde"])
        for i, x, y, p in zip(points.ids, points.x, points.y, points.pde):
            w.writerow([int(i), repr(float(x)), repr(float(y)), repr(float(p))])


def assignment_properties(assignments: dict[int, DamageAssignment]) -> dict[int, dict]:
    return {fid: {"pde": None if a.pde is None or math.isnan(a.pde) else a.pde,
                  "source": a.source, "damage_class": a.damage_class}
            for fid, a in assignments.items()}


def read_assignments(path) -> dict[int, DamageAssignment]:
    with open(path) as fh:
        obj = json.load(fh)
    out = {}
    for feat in obj["features"]:
        p = feat["properties"]
        fid = int(p["id"])
        out[fid] = DamageAssignment(fid, p.get("pde"), p["source"], int(p["damage_class"]))
    return out
