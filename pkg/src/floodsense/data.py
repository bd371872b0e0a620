"""Synthetic multimodal flood events and the chip preparation pipeline.

Every raster is channels-first ``(C, H, W)``; label rasters are ``(H, W)``
uint8. The value 255 marks no-data everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .encoders import ModalityBundle
from .geo import NODATA, Footprint, GridSpec, rectangle, write_footprints
from .groundtruth import PdePoints, write_points_csv

CONTINUOUS = ("pre_sar", "post_sar", "vhr")
ORDINAL = ("risk",)
RASTERS = CONTINUOUS + ORDINAL
LABEL_CLASSES = {"bda": (0, 1, 2, 3), "fm": (0, 1, 2), "loc": (0, 1)}
CHANNEL_NAMES = {
    "pre_sar": ["vv_intensity", "vh_intensity", "vv_coherence", "vh_coherence"],
    "post_sar": ["vv_intensity", "vh_intensity", "vv_coherence", "vh_coherence"],
    "vhr": ["red", "green", "blue"],
    "risk": ["risk_level"],
}
PDE_RANGES = {1: (0.05, 0.30), 2: (0.35, 0.60), 3: (0.65, 0.95)}


@dataclass
class ChipSample:
    chip_id: int
    pre_sar: np.ndarray
    post_sar: np.ndarray
    risk: np.ndarray
    vhr: np.ndarray
    labels: dict[str, np.ndarray]
    grid: GridSpec | None = None

    @property
    def hw(self) -> tuple[int, int]:
        return self.pre_sar.shape[1:]

    def rasters(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in RASTERS}

    def map(self, fn_raster, fn_label=None, grid=None) -> ChipSample:
        """Apply ``fn_raster(name, arr)`` to every raster and ``fn_label(name, arr)`` to labels."""
        fn_label = fn_label or fn_raster
        return replace(self, **{k: fn_raster(k, v) for k, v in self.rasters().items()},
                       labels={k: fn_label(k, v) for k, v in self.labels.items()}, grid=grid)

    def bundle(self) -> ModalityBundle:
        return ModalityBundle(self.pre_sar, self.post_sar, self.risk, self.vhr)

    def has_vhr(self) -> bool:
        return bool((self.vhr != NODATA).any())


@dataclass(frozen=True)
class SynthConfig:
    size: int = 512
    pixel_size: float = 5.0
    water_band: tuple[float, float] = (0.10, 0.40)
    vhr_fraction: float = 0.3
    building_density: float = 1 / 300     # target buildings per pixel
    building_gap: int = 4                 # min free pixels between buildings
    building_size: tuple[int, int] = (3, 7)
    speckle_looks: float = 4.0


@dataclass
class SynthEvent:
    chips: list[ChipSample]
    footprints: list[Footprint]
    points: PdePoints
    truth: dict[int, int]                     # footprint id -> generator damage class
    chip_of: dict[int, int] = field(default_factory=dict)


def _chip_rng(seed: int, chip_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(chip_id)])


def _smooth_field(rng, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="reflect")
    f -= f.min()
    return f / max(f.max(), 1e-12)


def _place_buildings(rng, free: np.ndarray, cfg: SynthConfig) -> list[tuple[int, int, int, int]]:
    """Non-overlapping rectangles (r0, c0, r1, c1) inclusive, on land, separated by ``building_gap``."""
    size = free.shape[0]
    target = max(1, int(round(size * size * cfg.building_density)))
    occupied = ~free
    lo, hi = cfg.building_size
    out = []
    for _ in range(target * 30):
        if len(out) >= target:
            break
        h, w = rng.integers(lo, hi + 1, size=2)
        r0 = int(rng.integers(0, size - h + 1))
        c0 = int(rng.integers(0, size - w + 1))
        g = cfg.building_gap
        if occupied[max(0, r0 - g):r0 + h + g, max(0, c0 - g):c0 + w + g].any():
            continue
        out.append((r0, c0, r0 + h - 1, c0 + w - 1))
        occupied[r0:r0 + h, c0:c0 + w] = True
    return out


def _damage_class(dist_to_water: float, risk: float, noise: float) -> int:
    """Monotone in water proximity and risk level."""
    score = (20.0 - dist_to_water) / 4.0 + 0.3 * (risk - 1.0) + noise
    return int(np.clip(np.floor(score), 0, 3))


def synth_chip(seed: int, chip_id: int, grid: GridSpec, cfg: SynthConfig, first_fid: int):
    """One chip plus its buildings ``[(footprint, class)]`` and PDE points ``[(x, y, pde)]``."""
    S = cfg.size
    rng = _chip_rng(seed, chip_id)
    terrain = _smooth_field(rng, S, S / 8)
    frac = rng.uniform(*cfg.water_band)
    post_water = terrain < np.quantile(terrain, frac)
    pre_water = terrain < np.quantile(terrain, frac * 0.3)
    risk = (4 - np.minimum(np.floor(terrain * 5), 4)).astype(np.float32)

    free = ~ndimage.binary_dilation(post_water, iterations=1)
    boxes = _place_buildings(rng, free, cfg)
    dist = ndimage.distance_transform_edt(~post_water)

    building_cls = np.full((S, S), NODATA, dtype=np.uint8)
    buildings = []
    pts = []
    for i, (r0, c0, r1, c1) in enumerate(boxes):
        block = np.s_[r0:r1 + 1, c0:c1 + 1]
        cls = _damage_class(float(dist[block].min()), float(risk[block].mean()), rng.normal(0, 0.2))
        building_cls[block] = cls
        x0 = grid.origin_x + c0 * grid.pixel_size
        x1 = grid.origin_x + (c1 + 1) * grid.pixel_size
        y1 = grid.origin_y - r0 * grid.pixel_size
        y0 = grid.origin_y - (r1 + 1) * grid.pixel_size
        fp = rectangle(first_fid + i, x0, y0, x1, y1)
        buildings.append((fp, cls))
        if cls > 0:
            for _ in range(int(rng.integers(1, 3))):
                px = rng.uniform(x0 + 0.1 * (x1 - x0), x1 - 0.1 * (x1 - x0))
                py = rng.uniform(y0 + 0.1 * (y1 - y0), y1 - 0.1 * (y1 - y0))
                pts.append((px, py, float(rng.uniform(*PDE_RANGES[cls]))))

    is_bldg = building_cls != NODATA
    dmg = np.where(is_bldg, building_cls, 0).astype(np.float64)
    looks = cfg.speckle_looks

    def speckle(shape):
        return rng.gamma(looks, 1.0 / looks, size=shape)

    texture = 0.25 + 0.15 * _smooth_field(rng, S, 2.0)

    def intensity(water, extra):
        base = np.where(water, 0.03, texture) + extra
        vv = base * speckle((S, S))
        vh = 0.5 * base * speckle((S, S))
        return vv, vh

    pre_vv, pre_vh = intensity(pre_water, np.where(is_bldg, 0.6, 0.0))
    post_vv, post_vh = intensity(post_water, np.where(is_bldg, 0.6 + 0.15 * dmg, 0.0))
    pre_coh = np.where(pre_water, 0.15, np.where(is_bldg, 0.9, 0.7))
    post_coh = np.where(post_water, 0.1, np.where(is_bldg, 0.9 - 0.22 * dmg, 0.65))
    noise = lambda: rng.normal(0, 0.03, size=(S, S))  # noqa: E731
    pre_sar = np.stack([pre_vv, pre_vh, pre_coh + noise(), pre_coh + noise()]).astype(np.float32)
    post_sar = np.stack([post_vv, post_vh, post_coh + noise(), post_coh + noise()]).astype(np.float32)

    if rng.uniform() < cfg.vhr_fraction:
        rgb = np.array([[0.35, 0.55, 0.3], [0.2, 0.35, 0.6], [0.6, 0.6, 0.6]])
        kind = np.where(post_water, 1, 0)
        kind = np.where(is_bldg, 2, kind)
        vhr = rgb[kind].transpose(2, 0, 1) * (1.0 - 0.15 * dmg)[None]
        vhr = (vhr + rng.normal(0, 0.03, size=vhr.shape)).astype(np.float32)
    else:
        vhr = np.full((3, S, S), NODATA, dtype=np.float32)

    near_bldg = ndimage.binary_dilation(is_bldg, iterations=3)
    fm = np.where(post_water, np.where(near_bldg, 2, 1), 0).astype(np.uint8)
    labels = {"bda": building_cls, "fm": fm, "loc": is_bldg.astype(np.uint8)}
    chip = ChipSample(chip_id, pre_sar, post_sar, risk[None], vhr, labels, grid)
    return chip, buildings, pts


def chip_grid(chip_id: int, n_chips: int, cfg: SynthConfig) -> GridSpec:
    """Chips tile the event area row by row, north-up."""
    ncol = int(math.ceil(math.sqrt(n_chips)))
    row, col = divmod(chip_id, ncol)
    span = cfg.size * cfg.pixel_size
    return GridSpec(cfg.size, cfg.size, col * span, -row * span, cfg.pixel_size)


def synth_event(seed: int, n_chips: int, size: int = 512, cfg: SynthConfig | None = None) -> SynthEvent:
    cfg = replace(cfg or SynthConfig(), size=size)
    if size % 64 or size <= 0:
        raise ValueError(f"chip size must be a positive multiple of 64, got {size}")
    if n_chips < 1:
        raise ValueError("need at least one chip")
    chips, footprints, truth, chip_of = [], [], {}, {}
    xs, ys, pdes = [], [], []
    for cid in range(n_chips):
        # ids are reserved per chip so chip content never depends on its neighbours
        first = cid * 100_000
        chip, blds, pts = synth_chip(seed, cid, chip_grid(cid, n_chips, cfg), cfg, first)
        chips.append(chip)
        for fp, cls in blds:
            footprints.append(fp)
            truth[fp.id] = cls
            chip_of[fp.id] = cid
        for x, y, p in pts:
            xs.append(x)
            ys.append(y)
            pdes.append(p)
    points = PdePoints.from_arrays(xs, ys, pdes)
    return SynthEvent(chips, footprints, points, truth, chip_of)


# ---------------------------------------------------------------------------
# preparation pipeline
# ---------------------------------------------------------------------------

def grid_partition(sample: ChipSample, tile: int = 64) -> list[ChipSample]:
    """Lossless row-major tiling into ``tile x tile`` sub-chips."""
    H, W = sample.hw
    if H % tile or W % tile:
        raise ValueError(f"chip {H}x{W} is not divisible into {tile}x{tile} tiles")
    out = []
    for i in range(H // tile):
        for j in range(W // tile):
            sl = np.s_[..., i * tile:(i + 1) * tile, j * tile:(j + 1) * tile]
            g = sample.grid
            sub_grid = None if g is None else GridSpec(
                tile, tile, g.origin_x + j * tile * g.pixel_size, g.origin_y - i * tile * g.pixel_size, g.pixel_size)
            out.append(replace(sample.map(lambda _, a: a[sl].copy(), grid=sub_grid),
                               chip_id=sample.chip_id * 10_000 + i * (W // tile) + j))
    return out


def reassemble(tiles: list[ChipSample], rows: int, cols: int) -> ChipSample:
    def join(get):
        return np.concatenate([np.concatenate([get(tiles[i * cols + j]) for j in range(cols)], axis=-1)
                               for i in range(rows)], axis=-2)
    first = tiles[0]
    rast = {k: join(lambda t, k=k: getattr(t, k)) for k in RASTERS}
    labels = {k: join(lambda t, k=k: t.labels[k]) for k in first.labels}
    grid = None
    if first.grid is not None:
        g = first.grid
        grid = GridSpec(g.width * cols, g.height * rows, g.origin_x, g.origin_y, g.pixel_size)
    return ChipSample(first.chip_id // 10_000, labels=labels, grid=grid, **rast)


def _nearest_index(n_src: int, n_dst: int) -> np.ndarray:
    return np.minimum(((np.arange(n_dst) + 0.5) * n_src / n_dst).astype(np.int64), n_src - 1)


def resize_nearest(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    H, W = a.shape[-2:]
    return a[..., _nearest_index(H, out_h)[:, None], _nearest_index(W, out_w)[None, :]]


def resize_bilinear(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear; outputs touching a no-data source cell use nearest instead."""
    H, W = a.shape[-2:]

    def coords(n_src, n_dst):
        s = np.clip((np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5, 0, n_src - 1)
        i0 = np.floor(s).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_src - 1)
        return i0, i1, s - i0

    r0, r1, fr = coords(H, out_h)
    c0, c1, fc = coords(W, out_w)
    a64 = a.astype(np.float64)
    q00 = a64[..., r0[:, None], c0[None, :]]
    q01 = a64[..., r0[:, None], c1[None, :]]
    q10 = a64[..., r1[:, None], c0[None, :]]
    q11 = a64[..., r1[:, None], c1[None, :]]
    fr, fc = fr[:, None], fc[None, :]
    out = (q00 * (1 - fr) * (1 - fc) + q01 * (1 - fr) * fc + q10 * fr * (1 - fc) + q11 * fr * fc)
    bad = (q00 == NODATA) | (q01 == NODATA) | (q10 == NODATA) | (q11 == NODATA)
    out = np.where(bad, resize_nearest(a64, out_h, out_w), out)
    return out.astype(a.dtype)


def upsample_to_common(sample: ChipSample, target: int = 1280) -> ChipSample:
    """Resize every raster to ``target x target``: bilinear for continuous, nearest for ordinal and labels."""
    H, W = sample.hw
    if H != W:
        raise ValueError("resolution unification expects square chips")

    def rast(name, a):
        return resize_bilinear(a, target, target) if name in CONTINUOUS else resize_nearest(a, target, target)

    grid = None if sample.grid is None else sample.grid.scaled(target / H)
    return sample.map(rast, lambda _, a: resize_nearest(a, target, target), grid=grid)


def block_majority(labels: np.ndarray, factor: int) -> np.ndarray:
    """Downsample a label raster by integer ``factor``; ties go to the lowest value."""
    H, W = labels.shape
    blocks = labels.reshape(H // factor, factor, W // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(H // factor, W // factor, -1).astype(np.int64)
    counts = np.stack([(blocks == v).sum(-1) for v in range(256)], axis=-1)
    return counts.argmax(-1).astype(labels.dtype)


def random_crop(sample: ChipSample, size: int, rng: np.random.Generator) -> ChipSample:
    H, W = sample.hw
    if size > H or size > W:
        raise ValueError(f"crop {size} exceeds sample {H}x{W}")
    r = int(rng.integers(0, H - size + 1))
    c = int(rng.integers(0, W - size + 1))
    sl = np.s_[..., r:r + size, c:c + size]
    g = sample.grid
    grid = None if g is None else GridSpec(size, size, g.origin_x + c * g.pixel_size,
                                           g.origin_y - r * g.pixel_size, g.pixel_size)
    return sample.map(lambda _, a: a[sl].copy(), grid=grid)


def apply_transform(a: np.ndarray, k: int, hflip: bool, vflip: bool) -> np.ndarray:
    a = np.rot90(a, k, axes=(-2, -1))
    if hflip:
        a = a[..., :, ::-1]
    if vflip:
        a = a[..., ::-1, :]
    return np.ascontiguousarray(a)


def augment(sample: ChipSample, rng: np.random.Generator) -> ChipSample:
    """One draw of (rotation, h-flip, v-flip) applied jointly; the georeference is dropped."""
    k = int(rng.integers(0, 4))
    hflip, vflip = bool(rng.integers(0, 2)), bool(rng.integers(0, 2))
    return sample.map(lambda _, a: apply_transform(a, k, hflip, vflip), grid=None)


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) < 0:
            raise ValueError("split ratios must be non-negative and sum to 1")


def split(chip_ids, spec: SplitSpec = SplitSpec()) -> dict[str, list]:
    ids = list(chip_ids)
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    n = len(ids)
    n_train = int(round(spec.ratios[0] * n))
    n_val = min(int(round(spec.ratios[1] * n)), n - n_train)
    shuffled = [ids[i] for i in order]
    return {"train": shuffled[:n_train], "val": shuffled[n_train:n_train + n_val],
            "test": shuffled[n_train + n_val:]}


@dataclass
class NormStats:
    mean: dict[str, list[float]]
    std: dict[str, list[float]]

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_json(cls, obj) -> NormStats:
        return cls(obj["mean"], obj["std"])


def compute_stats(samples: list[ChipSample], keys=RASTERS) -> NormStats:
    """Per-channel mean/std over valid cells; exact summation keeps them independent of chip order."""
    mean, std = {}, {}
    for key in keys:
        C = getattr(samples[0], key).shape[0]
        mean[key], std[key] = [], []
        for c in range(C):
            vals = np.concatenate([getattr(s, key)[c].ravel() for s in samples]).astype(np.float64)
            vals = vals[vals != NODATA]
            if vals.size == 0:
                mean[key].append(0.0)
                std[key].append(1.0)
                continue
            m = math.fsum(vals) / vals.size
            v = math.fsum((vals - m) ** 2) / vals.size
            mean[key].append(m)
            std[key].append(math.sqrt(v) if v > 0 else 1.0)
    return NormStats(mean, std)


def normalize(sample: ChipSample, stats: NormStats) -> ChipSample:
    def norm(name, a):
        if name not in stats.mean:
            return a
        m = np.asarray(stats.mean[name], dtype=np.float64)[:, None, None]
        s = np.asarray(stats.std[name], dtype=np.float64)[:, None, None]
        valid = a != NODATA
        return np.where(valid, (a.astype(np.float64) - m) / s, a).astype(a.dtype)

    return sample.map(norm, lambda _, a: a, grid=sample.grid)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_chip(path, sample: ChipSample) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"chip_id": sample.chip_id, "nodata": NODATA, "crs": "local-planar-m",
                "resolution": None if sample.grid is None else sample.grid.pixel_size,
                "grid": None if sample.grid is None else sample.grid.to_json(),
                "rasters": {}, "labels": {}}
    for name, arr in sample.rasters().items():
        manifest["rasters"][name] = {"shape": list(arr.shape), "dtype": "float32",
                                     "channels": CHANNEL_NAMES[name], "file": f"{name}.bin"}
        (path / f"{name}.bin").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for name, arr in sorted(sample.labels.items()):
        manifest["labels"][name] = {"shape": list(arr.shape), "dtype": "uint8",
                                    "classes": list(LABEL_CLASSES[name]), "file": f"{name}.bin"}
        (path / f"{name}.bin").write_bytes(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_chip(path) -> ChipSample:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath}: chip manifest not found")
    m = json.loads(mpath.read_text())

    def load(entry, dtype, field_name):
        raw = (path / entry["file"]).read_bytes()
        shape = tuple(entry["shape"])
        if len(raw) != int(np.prod(shape)) * np.dtype(dtype).itemsize:
            raise ValueError(f"{path / entry['file']}: size does not match manifest field {field_name!r}")
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    rast = {k: load(m["rasters"][k], "<f4", k).astype(np.float32) for k in RASTERS}
    labels = {k: load(v, np.uint8, k) for k, v in m["labels"].items()}
    for k, lab in labels.items():
        allowed = set(LABEL_CLASSES[k]) | {NODATA}
        if not set(np.unique(lab).tolist()) <= allowed:
            raise ValueError(f"{path}: label raster {k!r} has values outside {sorted(allowed)}")
    g = m.get("grid")
    grid = None if g is None else GridSpec(g["width"], g["height"], g["origin_x"], g["origin_y"], g["pixel_size"])
    return ChipSample(int(m["chip_id"]), labels=labels, grid=grid, **rast)


def write_event(out_dir, event: SynthEvent) -> None:
    out = Path(out_dir)
    (out / "chips").mkdir(parents=True, exist_ok=True)
    for chip in event.chips:
        write_chip(out / "chips" / f"{chip.chip_id:05d}", chip)
    write_footprints(event.footprints, out / "footprints.geojson",
                     {fid: {"chip": event.chip_of[fid]} for fid in event.truth})
    write_points_csv(event.points, out / "points.csv")
    (out / "truth.json").write_text(json.dumps({str(k): v for k, v in sorted(event.truth.items())},
                                               sort_keys=True) + "\n")


def read_chips(out_dir) -> list[ChipSample]:
    root = Path(out_dir) / "chips"
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: chip directory not found")
    return [read_chip(p) for p in sorted(root.iterdir()) if p.is_dir()]
