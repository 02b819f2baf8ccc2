import math

import numpy as np
import pytest

from wsqa.raster import AnnotationSet, ChannelStack, InstanceMask, iou
from wsqa.tiling import TilingError, dice, dice_annotations, dice_indices, merge

from conftest import disc_bits


def make_slide(w, h, channels=2, seed=0):
    rng = np.random.default_rng(seed)
    return ChannelStack(
        rng.integers(0, 4000, (channels, h, w)).astype(np.uint16),
        ("DAPI", "PanHistone")[:channels],
    )


def cover_count(length, tile, stride):
    """Independent count: flush-clamp origins needed to cover an axis."""
    if length <= tile:
        return 1
    return math.ceil((length - tile) / stride) + 1


class TestDice:
    def test_exact_fit_single_tile(self):
        tiles = dice(make_slide(512, 512), 512, 50)
        assert len(tiles) == 1
        assert tiles[0][0].origin == (0, 0)

    def test_974_wide_two_columns(self):
        idx = dice_indices(974, 512, 512, 50)
        xs = sorted({ti.origin[0] for ti in idx})
        assert xs == [0, 462]
        assert len(idx) == cover_count(974, 512, 462) * cover_count(512, 512, 462)

    def test_wsi_scale_tile_count(self):
        idx = dice_indices(29398, 43054, 512, 50)
        cols = cover_count(29398, 512, 462)
        rows = cover_count(43054, 512, 462)
        assert (cols, rows) == (64, 94)
        assert len(idx) == 6016

    def test_every_pixel_covered_and_bands_doubled(self):
        w, h = 700, 650
        idx = dice_indices(w, h, 256, 30)
        counts = np.zeros((h, w), dtype=int)
        for ti in idx:
            x, y = ti.origin
            tw, th = ti.extent
            counts[y : y + th, x : x + tw] += 1
        assert counts.min() >= 1
        # interior band pixel: x in [226, 256) belongs to two columns
        assert counts[100, 230] >= 2

    def test_row_major_order(self):
        idx = dice_indices(1000, 800, 512, 50)
        origins = [ti.origin for ti in idx]
        assert origins == sorted(origins, key=lambda o: (o[1], o[0]))

    def test_small_slide_clamped(self):
        tiles = dice(make_slide(100, 90), 512, 50)
        assert len(tiles) == 1
        ti, crop = tiles[0]
        assert ti.extent == (100, 90)
        assert crop.width == 100 and crop.height == 90

    def test_bad_geometry_rejected(self):
        with pytest.raises(TilingError):
            dice_indices(100, 100, 64, 64)
        with pytest.raises(TilingError):
            dice_indices(0, 100, 64, 0)


def interior_annotation(idx, seed=0):
    """Instances placed strictly inside single tiles, avoiding overlap bands."""
    rng = np.random.default_rng(seed)
    masks = []
    mid = 1
    for ti in idx:
        x, y = ti.origin
        tw, th = ti.extent
        band = ti.overlap
        # keep a margin wider than the band on every side
        cx = x + int(rng.integers(band + 12, tw - band - 12))
        cy = y + int(rng.integers(band + 12, th - band - 12))
        bits = np.zeros((2000, 2000), bool)
        bits[cy - 4 : cy + 4, cx - 4 : cx + 4] = True
        masks.append(InstanceMask.from_bitmask(mid, bits))
        mid += 1
    return masks


class TestMerge:
    def test_dice_merge_round_trip_identity(self):
        for seed in range(5):
            w, h = 900, 700
            idx = dice_indices(w, h, 256, 40)
            masks = interior_annotation(idx, seed)
            slide_set = AnnotationSet("slide", tuple(masks), "raw")
            per_tile = dice_annotations(slide_set, idx)
            merged = merge([(ti, per_tile[ti.tile_id]) for ti in idx])
            assert len(merged) == len(masks)
            originals = {(m.bbox, m.rle) for m in masks}
            recovered = {(m.bbox, m.rle) for m in merged.instances}
            assert originals == recovered

    def test_duplicate_in_band_collapses_to_larger(self):
        idx = dice_indices(974, 512, 512, 50)
        t0 = next(ti for ti in idx if ti.origin == (0, 0))
        t1 = next(ti for ti in idx if ti.origin == (462, 0))
        # same nucleus seen by both tiles: full in t0, truncated in t1
        bits0 = disc_bits((512, 512), 250, 470, 10)
        a0 = AnnotationSet(t0.tile_id, (InstanceMask.from_bitmask(1, bits0),), "raw")
        bits1 = disc_bits((512, 512), 250, 470 - 462, 10)
        bits1[:, :2] = False  # truncated at the tile edge
        a1 = AnnotationSet(t1.tile_id, (InstanceMask.from_bitmask(1, bits1),), "raw")
        merged = merge([(t0, a0), (t1, a1)])
        assert len(merged) == 1
        assert merged.instances[0].area == int(bits0.sum())

    def test_disjoint_tiles_concatenate(self):
        idx = dice_indices(974, 512, 512, 50)
        sets = []
        for i, ti in enumerate(idx):
            bits = disc_bits((512, 512), 200, 200, 8)
            sets.append(
                (ti, AnnotationSet(ti.tile_id, (InstanceMask.from_bitmask(1, bits),), "raw"))
            )
        merged = merge(sets)
        assert len(merged) == len(idx)

    def test_no_conflicting_pair_survives(self):
        rng = np.random.default_rng(2)
        idx = dice_indices(600, 600, 256, 40)
        per_tile = []
        for ti in idx:
            masks = []
            for mid in range(1, 5):
                cx, cy = rng.integers(30, 220, 2)
                bits = disc_bits((ti.extent[1], ti.extent[0]), cy, cx, int(rng.integers(6, 14)))
                masks.append(InstanceMask.from_bitmask(mid, bits))
            per_tile.append((ti, AnnotationSet(ti.tile_id, tuple(masks), "raw")))
        merged = merge(per_tile, dedup_iou=0.5)
        inst = merged.instances
        for i in range(len(inst)):
            for j in range(i + 1, len(inst)):
                assert iou(inst[i], inst[j]) <= 0.5

    def test_suspect_loses_regardless_of_area(self):
        idx = dice_indices(974, 512, 512, 50)
        t0 = next(ti for ti in idx if ti.origin == (0, 0))
        t1 = next(ti for ti in idx if ti.origin == (462, 0))
        # t1's copy is larger (it swallowed a neighbor slab) but touches its
        # tile's interior edge; it must lose anyway
        bits0 = disc_bits((512, 512), 250, 480, 10)
        a0 = AnnotationSet(t0.tile_id, (InstanceMask.from_bitmask(1, bits0),), "raw")
        bits1 = disc_bits((512, 512), 250, 480 - 462, 10)
        bits1[240:260, 0:8] = True  # touches x=0, the interior tile edge
        a1 = AnnotationSet(t1.tile_id, (InstanceMask.from_bitmask(1, bits1),), "raw")
        assert bits1.sum() > bits0.sum()
        merged = merge([(t0, a0), (t1, a1)])
        assert len(merged) == 1
        assert merged.instances[0].area == int(bits0.sum())

    def test_inconsistent_geometry_rejected(self):
        i1 = dice_indices(512, 512, 512, 50)[0]
        i2 = dice_indices(512, 512, 256, 30)[0]
        empty = AnnotationSet("x", (), "raw")
        with pytest.raises(TilingError):
            merge([(i1, empty), (i2, empty)])
