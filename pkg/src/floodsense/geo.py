"""Planar geometry, georeferenced grids and vector/raster file formats."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import shapely.geometry

NODATA = 255


@dataclass(frozen=True)
class GridSpec:
    """North-up raster georeference: top-left origin, square pixels in metres."""

    width: int
    height: int
    origin_x: float
    origin_y: float
    pixel_size: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or not self.pixel_size > 0:
            raise ValueError(f"degenerate grid: {self}")

    def pixel_centers(self, rows, cols) -> tuple[np.ndarray, np.ndarray]:
        x = self.origin_x + (np.asarray(cols) + 0.5) * self.pixel_size
        y = self.origin_y - (np.asarray(rows) + 0.5) * self.pixel_size
        return x, y

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.origin_x, self.origin_y - self.height * self.pixel_size,
                self.origin_x + self.width * self.pixel_size, self.origin_y)

    def scaled(self, factor: float) -> GridSpec:
        """Same extent with ``factor`` times as many pixels per axis."""
        return GridSpec(int(round(self.width * factor)), int(round(self.height * factor)),
                        self.origin_x, self.origin_y, self.pixel_size / factor)

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "origin_x": self.origin_x,
                "origin_y": self.origin_y, "pixel_size": self.pixel_size, "nodata": NODATA}


@dataclass
class Footprint:
    id: int
    rings: list[np.ndarray]   # exterior first, then holes; each closed (first == last)

    def __post_init__(self):
        self.rings = [np.asarray(r, dtype=np.float64) for r in self.rings]

    @property
    def exterior(self) -> np.ndarray:
        return self.rings[0]

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        e = self.exterior
        return e[:, 0].min(), e[:, 1].min(), e[:, 0].max(), e[:, 1].max()

    @property
    def area(self) -> float:
        return abs(_signed_area(self.exterior)) - sum(abs(_signed_area(h)) for h in self.rings[1:])

    @property
    def centroid(self) -> tuple[float, float]:
        ax = ay = at = 0.0
        for i, ring in enumerate(self.rings):
            a = _signed_area(ring)
            cx, cy = _ring_centroid(ring, a)
            s = abs(a) * (1 if i == 0 else -1)
            ax += s * cx
            ay += s * cy
            at += s
        return ax / at, ay / at

    def validate(self) -> None:
        for ring in self.rings:
            if len(ring) < 4 or not np.array_equal(ring[0], ring[-1]):
                raise ValueError(f"footprint {self.id}: ring is not closed")
        if not self.area > 0:
            raise ValueError(f"footprint {self.id}: zero area")
        if not self.to_shapely().is_valid:
            raise ValueError(f"footprint {self.id}: self-intersecting polygon")

    def to_shapely(self) -> shapely.geometry.Polygon:
        return shapely.geometry.Polygon(self.rings[0], self.rings[1:])

    def contains(self, x, y) -> np.ndarray:
        return points_in_rings(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), self.rings)


def rectangle(fid: int, x0: float, y0: float, x1: float, y1: float) -> Footprint:
    ring = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
    return Footprint(fid, [np.array(ring)])


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:-1, 0], ring[:-1, 1]
    x2, y2 = ring[1:, 0], ring[1:, 1]
    return 0.5 * float(np.sum(x * y2 - x2 * y))


def _ring_centroid(ring: np.ndarray, area: float) -> tuple[float, float]:
    x, y = ring[:-1, 0], ring[:-1, 1]
    x2, y2 = ring[1:, 0], ring[1:, 1]
    cross = x * y2 - x2 * y
    return float(np.sum((x + x2) * cross) / (6 * area)), float(np.sum((y + y2) * cross) / (6 * area))


def points_in_rings(x: np.ndarray, y: np.ndarray, rings) -> np.ndarray:
    """Even-odd ray casting over all rings (holes toggle back to outside)."""
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for ring in rings:
        x1, y1 = ring[:-1, 0], ring[:-1, 1]
        x2, y2 = ring[1:, 0], ring[1:, 1]
        for a, b, c, d in zip(x1, y1, x2, y2):
            if b == d:
                continue
            crosses = (b > y) != (d > y)
            xint = (c - a) * (y - b) / (d - b) + a
            inside ^= crosses & (x < xint)
    return inside


def footprint_pixels(fp: Footprint, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Row/col indices of pixels whose centres fall inside the footprint."""
    xmin, ymin, xmax, ymax = fp.bbox
    ps = grid.pixel_size
    c0 = max(0, int(np.floor((xmin - grid.origin_x) / ps - 0.5)))
    c1 = min(grid.width - 1, int(np.ceil((xmax - grid.origin_x) / ps - 0.5)))
    r0 = max(0, int(np.floor((grid.origin_y - ymax) / ps - 0.5)))
    r1 = min(grid.height - 1, int(np.ceil((grid.origin_y - ymin) / ps - 0.5)))
    if c1 < c0 or r1 < r0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
    x, y = grid.pixel_centers(rr, cc)
    inside = fp.contains(x, y)
    return rr[inside], cc[inside]


class GridIndex:
    """Uniform bucket index over points for fixed-radius queries."""

    def __init__(self, x, y, cell: float):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.cell = float(cell)
        buckets: dict[tuple[int, int], list[int]] = {}
        ix = np.floor(self.x / self.cell).astype(np.int64)
        iy = np.floor(self.y / self.cell).astype(np.int64)
        for i, key in enumerate(zip(ix.tolist(), iy.tolist())):
            buckets.setdefault(key, []).append(i)
        self.buckets = {k: np.array(v, dtype=np.int64) for k, v in buckets.items()}

    def candidates(self, xmin, ymin, xmax, ymax) -> np.ndarray:
        i0, i1 = int(np.floor(xmin / self.cell)), int(np.floor(xmax / self.cell))
        j0, j1 = int(np.floor(ymin / self.cell)), int(np.floor(ymax / self.cell))
        found = [self.buckets[(i, j)] for i in range(i0, i1 + 1) for j in range(j0, j1 + 1)
                 if (i, j) in self.buckets]
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(found))

    def within(self, x: float, y: float, r: float) -> tuple[np.ndarray, np.ndarray]:
        """Indices within distance ``r`` (inclusive), sorted by (distance, index), and their distances."""
        idx = self.candidates(x - r, y - r, x + r, y + r)
        if idx.size == 0:
            return idx, np.empty(0)
        dist = np.hypot(self.x[idx] - x, self.y[idx] - y)
        keep = dist <= r
        idx, dist = idx[keep], dist[keep]
        order = np.lexsort((idx, dist))
        return idx[order], dist[order]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def read_footprints(path) -> list[Footprint]:
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: expected a GeoJSON FeatureCollection")
    out = []
    for i, feat in enumerate(obj["features"]):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ValueError(f"{path}: feature {i} is not a Polygon")
        props = feat.get("properties") or {}
        if "id" not in props:
            raise ValueError(f"{path}: feature {i} has no 'id' property")
        fp = Footprint(int(props["id"]), [np.asarray(r, dtype=np.float64) for r in geom["coordinates"]])
        fp.validate()
        out.append(fp)
    ids = [f.id for f in out]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate footprint ids")
    return out


def footprint_feature(fp: Footprint, properties: dict) -> dict:
    return {
        "type": "Feature",
        "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in fp.rings]},
        "properties": properties,
    }


def dump_geojson(obj: dict, path) -> None:
    """Deterministic serialization: sorted keys, fixed separators, trailing newline."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    Path(path).write_text(text + "\n")


def write_footprints(footprints, path, extra: dict | None = None) -> None:
    extra = extra or {}
    feats = [footprint_feature(fp, {"id": fp.id, **extra.get(fp.id, {})})
             for fp in sorted(footprints, key=lambda f: f.id)]
    dump_geojson({"type": "FeatureCollection", "features": feats}, path)


def write_raster(path, arr: np.ndarray, grid: GridSpec) -> None:
    """``<path>.json`` header plus ``<path>.bin`` row-major uint8 payload."""
    arr = np.asarray(arr)
    if arr.shape != (grid.height, grid.width):
        raise ValueError(f"raster shape {arr.shape} does not match grid {grid.height}x{grid.width}")
    path = Path(path)
    Path(str(path) + ".json").write_text(json.dumps(grid.to_json(), sort_keys=True) + "\n")
    Path(str(path) + ".bin").write_bytes(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def read_raster(path) -> tuple[np.ndarray, GridSpec]:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    if header.get("nodata", NODATA) != NODATA:
        raise ValueError(f"{path}: nodata must be {NODATA}")
    grid = GridSpec(int(header["width"]), int(header["height"]), float(header["origin_x"]),
                    float(header["origin_y"]), float(header["pixel_size"]))
    raw = Path(str(path) + ".bin").read_bytes()
    if len(raw) != grid.width * grid.height:
        raise ValueError(f"{path}: payload has {len(raw)} bytes, expected {grid.width * grid.height}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(grid.height, grid.width).copy(), grid
