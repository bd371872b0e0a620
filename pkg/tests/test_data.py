import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodsense import data as D
from floodsense.geo import NODATA, GridSpec


@pytest.fixture(scope="module")
def event():
    return D.synth_event(7, 16, 64)


def _sample(rng, size=16, vhr=True):
    f = lambda c: rng.standard_normal((c, size, size)).astype(np.float32)  # noqa: E731
    labels = {"bda": rng.choice([0, 1, 2, 3, 255], (size, size)).astype(np.uint8),
              "fm": rng.integers(0, 3, (size, size)).astype(np.uint8),
              "loc": rng.integers(0, 2, (size, size)).astype(np.uint8)}
    v = f(3) if vhr else np.full((3, size, size), NODATA, np.float32)
    return D.ChipSample(3, f(4), f(4), rng.integers(0, 5, (1, size, size)).astype(np.float32), v, labels,
                        GridSpec(size, size, 100.0, 900.0, 5.0))


def _equal(a, b):
    assert a.chip_id == b.chip_id and a.grid == b.grid
    for k in D.RASTERS:
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    assert a.labels.keys() == b.labels.keys()
    for k in a.labels:
        np.testing.assert_array_equal(a.labels[k], b.labels[k])


def test_same_seed_same_bytes(tmp_path):
    D.write_event(tmp_path / "a", D.synth_event(3, 2, 64))
    D.write_event(tmp_path / "b", D.synth_event(3, 2, 64))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_chip_content_independent_of_event_size():
    a = D.synth_event(5, 1, 64).chips[0]
    b = D.synth_event(5, 3, 64).chips[0]
    np.testing.assert_array_equal(a.post_sar, b.post_sar)


def test_size_must_divide_by_64():
    with pytest.raises(ValueError):
        D.synth_event(0, 1, 100)


def test_water_fraction_in_band(event):
    for chip in event.chips:
        frac = float((chip.labels["fm"] > 0).mean())
        assert 0.1 - 1e-3 <= frac <= 0.4 + 1e-3


def test_all_damage_classes_present(event):
    assert {1, 2, 3} <= set(event.truth.values())


def test_label_sets_and_vhr_mix(event):
    for chip in event.chips:
        for task, lab in chip.labels.items():
            assert set(np.unique(lab).tolist()) <= set(D.LABEL_CLASSES[task]) | {NODATA}
        assert np.isin(chip.risk, np.arange(5)).all()
        assert chip.has_vhr() or (chip.vhr == NODATA).all()
    assert 0 < sum(c.has_vhr() for c in event.chips) < len(event.chips)


def test_pde_points_fall_in_class_ranges(event):
    from floodsense.groundtruth import spatial_join
    a = spatial_join(event.points, event.footprints)
    for fid, rec in a.items():
        if rec.source == "direct":
            lo, hi = D.PDE_RANGES[event.truth[fid]]
            assert lo <= rec.pde <= hi


def test_grid_partition_round_trip():
    s = _sample(np.random.default_rng(0), size=128)
    tiles = D.grid_partition(s, 64)
    assert len(tiles) == 4
    np.testing.assert_array_equal(tiles[0].pre_sar, s.pre_sar[:, :64, :64])
    assert tiles[1].grid.origin_x == s.grid.origin_x + 64 * 5.0
    _equal(D.reassemble(tiles, 2, 2), s)
    with pytest.raises(ValueError):
        D.grid_partition(_sample(np.random.default_rng(0), size=100))


def test_full_size_tile_count():
    assert (512 // 64) ** 2 == 64
    assert 1296 * 64 == 82944


def test_upsample_constant_and_label_closure():
    s = _sample(np.random.default_rng(1))
    s.pre_sar[:] = 0.7
    up = D.upsample_to_common(s, 48)
    np.testing.assert_allclose(up.pre_sar, 0.7, rtol=1e-6)
    for task, lab in up.labels.items():
        assert set(np.unique(lab).tolist()) <= set(D.LABEL_CLASSES[task]) | {NODATA}
    assert up.grid.pixel_size * 48 == s.grid.pixel_size * 16


@given(st.integers(0, 10**6), st.sampled_from([2, 3, 4]))
def test_upsample_then_majority_restores_labels(seed, f):
    s = _sample(np.random.default_rng(seed), size=8)
    up = D.upsample_to_common(s, 8 * f)
    for k, lab in s.labels.items():
        np.testing.assert_array_equal(D.block_majority(up.labels[k], f), lab)


def test_bilinear_never_mixes_nodata():
    a = np.array([[[1.0, 2.0], [NODATA, 4.0]]], np.float32)
    out = D.resize_bilinear(a, 8, 8)
    assert set(np.unique(out[out >= 100]).tolist()) <= {NODATA}
    assert (out[out < 100] <= 4.0).all()
    np.testing.assert_array_equal(D.resize_bilinear(np.full((1, 3, 3), NODATA, np.float32), 9, 9), NODATA)


def test_crop():
    s = _sample(np.random.default_rng(2))
    _equal(D.random_crop(s, 16, np.random.default_rng(0)), s)
    a = D.random_crop(s, 7, np.random.default_rng(9))
    b = D.random_crop(s, 7, np.random.default_rng(9))
    _equal(a, b)
    with pytest.raises(ValueError):
        D.random_crop(s, 17, np.random.default_rng(0))


def test_transforms_compose_to_identity():
    a = np.arange(2 * 5 * 5).reshape(2, 5, 5)
    r = a
    for _ in range(4):
        r = D.apply_transform(r, 1, False, False)
    np.testing.assert_array_equal(r, a)
    np.testing.assert_array_equal(D.apply_transform(D.apply_transform(a, 0, True, False), 0, True, False), a)


@given(st.integers(0, 10**6))
def test_augment_preserves_histograms(seed):
    s = _sample(np.random.default_rng(seed), size=8)
    t = D.augment(s, np.random.default_rng(seed))
    for k in s.labels:
        assert np.array_equal(np.bincount(s.labels[k].ravel(), minlength=256),
                              np.bincount(t.labels[k].ravel(), minlength=256))


@settings(max_examples=25)
@given(st.integers(0, 10**6), st.integers(0, 15), st.integers(0, 15))
def test_sentinel_alignment_through_pipeline(seed, r, c):
    rng = np.random.default_rng(seed)
    s = _sample(rng, size=16)
    s = s.map(lambda _, a: np.zeros_like(a), grid=s.grid)
    for k in D.RASTERS:
        getattr(s, k)[:, r, c] = 3
    for k in s.labels:
        s.labels[k][r, c] = 1
    t = D.upsample_to_common(s, 32)
    t = D.random_crop(t, 24, rng)
    t = D.augment(t, rng)
    marks = {frozenset(map(tuple, np.argwhere(lab == 1).tolist())) for lab in t.labels.values()}
    marks.add(frozenset(map(tuple, np.argwhere(t.risk[0] == 3).tolist())))
    assert len(marks) == 1
    mark, = marks
    if not mark:
        return   # sentinel cropped away; only interpolation tails remain
    for k in D.CONTINUOUS:
        a = getattr(t, k)[0]
        assert set(map(tuple, np.argwhere(a == a.max()).tolist())) <= mark


def test_split_ratios_and_determinism():
    parts = D.split(range(10))
    assert [len(parts[k]) for k in ("train", "val", "test")] == [6, 2, 2]
    assert sorted(sum(parts.values(), [])) == list(range(10))
    assert D.split(range(10)) == parts
    assert D.split(range(10), D.SplitSpec(seed=1)) != parts
    with pytest.raises(ValueError):
        D.SplitSpec(ratios=(0.5, 0.5, 0.5))


def test_normalize_source_stats(event):
    chips = event.chips[:6]
    stats = D.compute_stats(chips)
    normed = [D.normalize(c, stats) for c in chips]
    for k in D.RASTERS:
        arr = np.stack([getattr(c, k) for c in normed]).astype(np.float64)
        orig = np.stack([getattr(c, k) for c in chips])
        for ch in range(arr.shape[1]):
            valid = orig[:, ch] != NODATA
            if not valid.any():
                np.testing.assert_array_equal(arr[:, ch], NODATA)
                continue
            v = arr[:, ch][valid]
            assert abs(v.mean()) < 1e-6 and abs(v.std() - 1) < 1e-5


def test_normalize_exact_in_float64():
    rng = np.random.default_rng(3)
    s = _sample(rng).map(lambda _, a: a.astype(np.float64), lambda _, a: a, grid=None)
    stats = D.compute_stats([s])
    n = D.normalize(s, stats)
    for ch in range(4):
        v = n.pre_sar[ch]
        assert abs(v.mean()) < 1e-10 and abs(v.std() - 1) < 1e-6


def test_stats_independent_of_chip_order(event):
    a = D.compute_stats(event.chips[:5])
    b = D.compute_stats(event.chips[:5][::-1])
    assert a.to_json() == b.to_json()
    assert D.NormStats.from_json(a.to_json()) == a


def test_chip_io_round_trip(tmp_path, event):
    chip = event.chips[1]
    D.write_chip(tmp_path / "c", chip)
    _equal(D.read_chip(tmp_path / "c"), chip)
    (tmp_path / "c" / "bda.bin").write_bytes(b"\x00")
    with pytest.raises(ValueError):
        D.read_chip(tmp_path / "c")
    with pytest.raises(FileNotFoundError):
        D.read_chip(tmp_path / "missing")
