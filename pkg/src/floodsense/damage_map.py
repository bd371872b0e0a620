"""Pixel-to-building aggregation and styled GeoJSON export."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geo import NODATA, Footprint, GridSpec, dump_geojson, footprint_feature, footprint_pixels

STATS = ("median", "mean", "mode", "max")
FILL = {0: "#d9d9d9", 1: "#ffd166", 2: "#f3722c", 3: "#d00000"}
CLASS_NAMES = {0: "no damage", 1: "minor", 2: "moderate", 3: "major"}


@dataclass(frozen=True)
class QualityThresholds:
    min_pixels: int = 4
    var_threshold: float = 0.5


@dataclass
class BuildingDamageRecord:
    footprint_id: int
    damage_class: int | None
    pixel_count: int
    label_variance: float
    flags: list[str] = field(default_factory=list)


def summarize(values: np.ndarray, stat: str = "median") -> int:
    """Collapse a non-empty set of ordinal class labels to one class."""
    v = np.sort(np.asarray(values, dtype=np.int64))
    if v.size == 0:
        raise ValueError("cannot summarize an empty pixel set")
    if stat == "median":
        return int(v[v.size // 2])           # upper median for even counts
    if stat == "mean":
        return int(np.floor(v.mean() + 0.5))
    if stat == "mode":
        counts = np.bincount(v)
        return int(np.flatnonzero(counts == counts.max())[-1])
    if stat == "max":
        return int(v[-1])
    raise ValueError(f"unknown statistic {stat!r}; expected one of {STATS}")


def label_variance(values: np.ndarray) -> float:
    """Population variance of integer labels, exact up to one final rounding."""
    n = int(values.size)
    s1 = int(values.sum())
    s2 = int((values * values).sum())
    return (n * s2 - s1 * s1) / (n * n)


def quality_flags(pixel_count: int, label_variance: float, th: QualityThresholds = QualityThresholds()) -> list[str]:
    flags = []
    if pixel_count < th.min_pixels:
        flags.append("low_coverage")
    if label_variance > th.var_threshold:
        flags.append("high_disagreement")
    return flags


def _overlaps(fp: Footprint, grid: GridSpec) -> bool:
    x0, y0, x1, y1 = grid.bounds
    a, b, c, d = fp.bbox
    return a < x1 and c > x0 and b < y1 and d > y0


def aggregate(pred: np.ndarray, grid: GridSpec, footprints: list[Footprint], stat: str = "median",
              th: QualityThresholds = QualityThresholds()) -> list[BuildingDamageRecord]:
    """One record per footprint (ascending id) from pixels whose centres fall inside it."""
    if stat not in STATS:
        raise ValueError(f"unknown statistic {stat!r}; expected one of {STATS}")
    pred = np.asarray(pred)
    if pred.shape != (grid.height, grid.width):
        raise ValueError(f"raster shape {pred.shape} does not match grid {grid.height}x{grid.width}")
    if footprints and not any(_overlaps(fp, grid) for fp in footprints):
        raise ValueError("no footprint intersects the raster extent; georeferencing mismatch")
    records = []
    for fp in sorted(footprints, key=lambda f: f.id):
        rr, cc = footprint_pixels(fp, grid)
        vals = pred[rr, cc]
        vals = vals[vals != NODATA].astype(np.int64)
        if vals.size == 0:
            records.append(BuildingDamageRecord(fp.id, None, 0, 0.0, quality_flags(0, 0.0, th)))
            continue
        var = label_variance(vals)
        records.append(BuildingDamageRecord(fp.id, summarize(vals, stat), int(vals.size), var,
                                            quality_flags(int(vals.size), var, th)))
    return records


def export_geojson(records: list[BuildingDamageRecord], footprints: list[Footprint], path,
                   style: bool = True) -> None:
    """Byte-stable FeatureCollection ordered by footprint id."""
    by_id = {fp.id: fp for fp in footprints}
    feats = []
    for rec in sorted(records, key=lambda r: r.footprint_id):
        if rec.footprint_id not in by_id:
            raise ValueError(f"record refers to unknown footprint {rec.footprint_id}")
        props = {
            "id": rec.footprint_id,
            "damage_class": rec.damage_class,
            "pixel_count": rec.pixel_count,
            "label_variance": rec.label_variance,
            "flags": list(rec.flags),
        }
        if style:
            props["fill"] = FILL.get(rec.damage_class, None)
        feats.append(footprint_feature(by_id[rec.footprint_id], props))
    obj = {"type": "FeatureCollection", "features": feats}
    if style:
        obj["style"] = {
            "property": "damage_class",
            "fill": {str(k): v for k, v in FILL.items()},
            "labels": {str(k): v for k, v in CLASS_NAMES.items()},
        }
    dump_geojson(obj, path)


def records_from_geojson(obj: dict) -> list[BuildingDamageRecord]:
    return [BuildingDamageRecord(int(p["id"]), p["damage_class"], int(p["pixel_count"]),
                                 float(p["label_variance"]), list(p["flags"]))
            for p in (f["properties"] for f in obj["features"])]


def validate_damage_geojson(obj: dict) -> None:
    """Raise ValueError unless ``obj`` follows the damage-map schema."""
    if obj.get("type") != "FeatureCollection" or not isinstance(obj.get("features"), list):
        raise ValueError("not a FeatureCollection")
    ids = []
    for i, f in enumerate(obj["features"]):
        if f.get("type") != "Feature":
            raise ValueError(f"feature {i}: bad type")
        g = f.get("geometry") or {}
        if g.get("type") != "Polygon" or not g.get("coordinates"):
            raise ValueError(f"feature {i}: geometry must be a Polygon")
        for ring in g["coordinates"]:
            if len(ring) < 4 or ring[0] != ring[-1]:
                raise ValueError(f"feature {i}: ring not closed")
        p = f.get("properties") or {}
        for key in ("id", "damage_class", "pixel_count", "label_variance", "flags"):
            if key not in p:
                raise ValueError(f"feature {i}: missing property {key!r}")
        if p["damage_class"] not in (None, 0, 1, 2, 3):
            raise ValueError(f"feature {i}: damage_class out of range")
        if p["pixel_count"] < 0 or p["label_variance"] < 0:
            raise ValueError(f"feature {i}: negative count or variance")
        if not set(p["flags"]) <= {"low_coverage", "high_disagreement"}:
            raise ValueError(f"feature {i}: unknown flag")
        if "fill" in p and p["fill"] != FILL.get(p["damage_class"]):
            raise ValueError(f"feature {i}: fill does not match class")
        ids.append(p["id"])
    if ids != sorted(ids):
        raise ValueError("features are not ordered by id")
