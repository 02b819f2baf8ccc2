import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from wsqa.raster import (
    AnnotationSet,
    ChannelStack,
    InstanceMask,
    MaskError,
    annotation_from_dict,
    annotation_to_dict,
    boundary_pixels,
    containment,
    iou,
    rle_decode,
    rle_encode,
    solidity,
)

from conftest import disc_bits, mask_from_bits, rect_mask


def naive_rle(bits):
    """Independent oracle: direct row-major pixel scan."""
    flat = bits.reshape(-1)
    counts = []
    current, run = 0, 0
    for v in flat:
        v = int(bool(v))
        if v == current:
            run += 1
        else:
            counts.append(run)  # emits the zero-length lead when fg starts
            current, run = v, 1
    counts.append(run)
    return counts


class TestRle:
    def test_all_background(self):
        assert list(rle_encode(np.zeros((2, 2), bool))) == [4]

    def test_all_foreground(self):
        assert list(rle_encode(np.ones((2, 2), bool))) == [0, 4]

    def test_top_left_block_matches_scan_oracle(self):
        bits = np.zeros((4, 4), bool)
        bits[:2, :2] = True
        assert list(rle_encode(bits)) == naive_rle(bits)

    def test_matches_scan_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            h, w = rng.integers(1, 15, 2)
            bits = rng.random((h, w)) < rng.uniform(0.1, 0.9)
            assert list(rle_encode(bits)) == naive_rle(bits)

    @settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_round_trip(self, data):
        h = data.draw(st.integers(1, 20))
        w = data.draw(st.integers(1, 20))
        bits = np.array(
            data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
        ).reshape(h, w)
        assert np.array_equal(rle_decode(rle_encode(bits), h, w), bits)

    def test_decode_rejects_bad_total(self):
        with pytest.raises(ValueError):
            rle_decode([3], 2, 2)


class TestGeometry:
    def test_iou_identity(self):
        a = rect_mask(1, 4, 4, 8, 8)
        assert iou(a, a) == 1.0

    def test_iou_disjoint(self):
        assert iou(rect_mask(1, 0, 0, 4, 4), rect_mask(2, 20, 20, 4, 4)) == 0.0

    def test_iou_strip_overlap(self):
        # two 2x4 rectangles sharing a 2x1 strip: 2 / (8 + 8 - 2)
        a = rect_mask(1, 0, 0, 4, 2)
        b = rect_mask(2, 3, 0, 4, 2)
        assert iou(a, b) == pytest.approx(2 / 14)

    def test_iou_symmetric_random(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            a = rect_mask(1, *rng.integers(0, 20, 2), *rng.integers(2, 20, 2))
            b = rect_mask(2, *rng.integers(0, 20, 2), *rng.integers(2, 20, 2))
            assert iou(a, b) == pytest.approx(iou(b, a))

    def test_containment_subset(self):
        outer = rect_mask(1, 0, 0, 10, 10)
        inner = rect_mask(2, 2, 2, 4, 4)
        assert containment(outer, inner) == 1.0

    def test_containment_disjoint(self):
        assert containment(rect_mask(1, 0, 0, 4, 4), rect_mask(2, 30, 30, 4, 4)) == 0.0

    def test_containment_half(self):
        a = rect_mask(1, 0, 0, 8, 4)
        b = rect_mask(2, 4, 0, 8, 4)  # a covers the left half of b
        assert containment(a, b) == pytest.approx(0.5)

    def test_containment_subset_always_one(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            x, y = rng.integers(0, 10, 2)
            w, h = rng.integers(4, 12, 2)
            outer = rect_mask(1, x, y, w, h)
            inner = rect_mask(2, x + 1, y + 1, w - 2, h - 2)
            assert containment(outer, inner) == 1.0


def hull_area_oracle(bits):
    """Raw shoelace area of the hull of boundary pixel centers."""
    border = boundary_pixels(bits)
    ys, xs = np.nonzero(border)
    pts = np.column_stack((xs, ys)).astype(float)
    hull = ConvexHull(pts)
    verts = pts[hull.vertices]
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(np.roll(x, 1), y))


class TestSolidity:
    def test_filled_rectangle(self):
        assert solidity(rect_mask(1, 3, 3, 14, 9)) == 1.0

    def test_disc(self):
        bits = disc_bits((48, 48), 23, 23, 20)
        m = mask_from_bits(1, bits)
        s = solidity(m)
        assert s >= 0.95
        assert s == pytest.approx(min(1.0, m.area / hull_area_oracle(m.decode())))

    def test_crescent_below_limit(self):
        disc = disc_bits((48, 48), 23, 23, 20)
        crescent = disc & ~disc_bits((48, 48), 23, 13, 18)
        m = mask_from_bits(1, crescent)
        s = solidity(m)
        assert s < 0.92
        assert s == pytest.approx(min(1.0, m.area / hull_area_oracle(m.decode())))

    def test_bite_never_raises_solidity(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            r = int(rng.integers(8, 16))
            disc = disc_bits((40, 40), 20, 20, r)
            bite = disc_bits((40, 40), 20, 20 - r, int(rng.integers(4, r)))
            bitten = disc & ~bite
            if bitten.sum() < 3:
                continue
            assert solidity(mask_from_bits(1, disc)) >= solidity(mask_from_bits(2, bitten))

    def test_collinear_is_one(self):
        bits = np.zeros((5, 5), bool)
        bits[2, 1:4] = True
        assert solidity(mask_from_bits(1, bits)) == 1.0


class TestInstanceMask:
    def test_rle_must_fill_bbox(self):
        with pytest.raises(MaskError):
            InstanceMask(id=1, bbox=(0, 0, 2, 2), rle=(1, 2), area=2)

    def test_area_must_match(self):
        with pytest.raises(MaskError):
            InstanceMask(id=1, bbox=(0, 0, 2, 2), rle=(0, 4), area=3)

    def test_empty_rejected(self):
        with pytest.raises(MaskError):
            InstanceMask(id=1, bbox=(0, 0, 2, 2), rle=(4,), area=0)

    def test_component_partition_enforced(self):
        whole = rect_mask(1, 0, 0, 4, 2)
        half = np.zeros((2, 4), bool)
        half[:, :2] = True
        m = whole.with_components(half)
        ov, co = m.decode_overlap(), m.decode_complement()
        assert np.array_equal(ov | co, m.decode())
        assert not (ov & co).any()
        bad_overlap = m.rle  # overlap == whole but complement missing
        with pytest.raises(MaskError):
            InstanceMask(id=1, bbox=m.bbox, rle=m.rle, area=m.area, overlap_rle=bad_overlap)

    def test_overlapping_components_rejected(self):
        whole = rect_mask(1, 0, 0, 4, 2)
        with pytest.raises(MaskError):
            InstanceMask(
                id=1,
                bbox=whole.bbox,
                rle=whole.rle,
                area=whole.area,
                overlap_rle=whole.rle,
                complement_rle=whole.rle,
            )

    def test_translation(self):
        m = rect_mask(1, 2, 3, 4, 5).translated(10, -1)
        assert m.bbox == (12, 2, 4, 5)


class TestChannelStack:
    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ValueError):
            ChannelStack(np.zeros((2, 4), dtype=np.uint16), ("a",))

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            ChannelStack(np.zeros((2, 4, 4), dtype=np.uint16), ("a", "a"))

    def test_nuclear_max_requires_channels(self):
        stack = ChannelStack(np.zeros((1, 4, 4), dtype=np.uint16), ("Other",))
        with pytest.raises(KeyError):
            stack.nuclear_max()


class TestAnnotationJson:
    def test_round_trip_bit_exact(self):
        whole = rect_mask(7, 1, 2, 6, 4)
        half = np.zeros((4, 6), bool)
        half[:, :3] = True
        with_comp = whole.with_components(half)
        aset = AnnotationSet("tile_0001_0002", (rect_mask(1, 0, 0, 3, 3), with_comp), "augmented")
        doc = annotation_to_dict(aset, 64, 64)
        text = json.dumps(doc, sort_keys=True)
        back, w, h = annotation_from_dict(json.loads(text))
        assert (w, h) == (64, 64)
        assert back == aset
        assert json.dumps(annotation_to_dict(back, w, h), sort_keys=True) == text

    def test_schema_fields(self):
        aset = AnnotationSet("t", (rect_mask(1, 0, 0, 3, 3),), "raw")
        doc = annotation_to_dict(aset, 8, 8)
        assert set(doc) == {"tile_id", "width", "height", "stage", "instances"}
        inst = doc["instances"][0]
        assert inst["rle"]["order"] == "row-major"
        assert inst["bbox"] == [0, 0, 3, 3]

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            AnnotationSet("t", (rect_mask(1, 0, 0, 3, 3), rect_mask(1, 5, 5, 3, 3)), "raw")
