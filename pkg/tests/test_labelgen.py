import logging

import numpy as np
import pytest

from nodseg.errors import InvalidInputError, UndefinedMetricError
from nodseg.labelgen import (
    LabelGenerator,
    NodulePoints,
    PointAnnotation,
    bounding_box_mask,
    complement_mask,
    fuse_labels,
    geometric_masks,
    label_bundle,
    label_precision,
    multi_nodule_fuse,
    precision_table,
    quadrilateral_mask,
    write_bundles,
)
from nodseg.utils import read_mask

DIAMOND = NodulePoints(left=(2, 5), right=(8, 5), top=(5, 2), bottom=(5, 8))


def _random_points(rng, h, w):
    x_lo, x_hi = sorted(rng.integers(0, w, size=2))
    y_lo, y_hi = sorted(rng.integers(0, h, size=2))
    return NodulePoints(
        left=(int(x_lo), int(rng.integers(0, h))),
        right=(int(x_hi), int(rng.integers(0, h))),
        top=(int(rng.integers(0, w)), int(y_lo)),
        bottom=(int(rng.integers(0, w)), int(y_hi)),
    )


def _inside_or_on(px, py, verts):
    """Per-pixel even-odd test with closed edges, evaluated one point at a time."""
    n = len(verts)
    for i in range(n):
        (x0, y0), (x1, y1) = verts[i], verts[(i + 1) % n]
        cross = (x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)
        if cross == 0 and min(x0, x1) <= px <= max(x0, x1) and min(y0, y1) <= py <= max(y0, y1):
            return True
    inside = False
    for i in range(n):
        (x0, y0), (x1, y1) = verts[i], verts[(i + 1) % n]
        if (y0 <= py < y1) or (y1 <= py < y0):
            if px < x0 + (py - y0) * (x1 - x0) / (y1 - y0):
                inside = not inside
    return inside


def test_bounding_box_of_diamond():
    mask = bounding_box_mask(DIAMOND, 10, 10)
    assert mask.sum() == 49
    assert mask[2:9, 2:9].all()


def test_coincident_points_give_single_pixel():
    point = NodulePoints(left=(4, 4), right=(4, 4), top=(4, 4), bottom=(4, 4))
    assert bounding_box_mask(point, 8, 8).sum() == 1
    assert quadrilateral_mask(point, 8, 8).sum() == 1


def test_bounding_box_matches_min_max(rng):
    for _ in range(200):
        pts = _random_points(rng, 12, 15)
        mask = bounding_box_mask(pts, 12, 15)
        xs = [p[0] for p in pts.vertices()]
        ys = [p[1] for p in pts.vertices()]
        ys_grid, xs_grid = np.mgrid[0:12, 0:15]
        expected = ((xs_grid >= min(xs)) & (xs_grid <= max(xs))
                    & (ys_grid >= min(ys)) & (ys_grid <= max(ys)))
        np.testing.assert_array_equal(mask, expected)


def test_diamond_quadrilateral_includes_edges():
    mask = quadrilateral_mask(DIAMOND, 10, 10)
    ys, xs = np.mgrid[0:10, 0:10]
    np.testing.assert_array_equal(mask, np.abs(xs - 5) + np.abs(ys - 5) <= 3)
    assert mask.sum() == 25


def test_quadrilateral_matches_pointwise_oracle(rng):
    for _ in range(100):
        pts = _random_points(rng, 12, 12)
        mask = quadrilateral_mask(pts, 12, 12)
        verts = pts.vertices()
        expected = np.array([[_inside_or_on(x, y, verts) for x in range(12)] for y in range(12)])
        np.testing.assert_array_equal(mask, expected)
        assert not (mask & ~bounding_box_mask(pts, 12, 12)).any()


def test_box_corners_fill_the_box():
    corners = NodulePoints(left=(2, 3), top=(8, 3), right=(8, 7), bottom=(2, 7))
    np.testing.assert_array_equal(quadrilateral_mask(corners, 10, 10), bounding_box_mask(corners, 10, 10))


def test_collinear_points_stay_on_their_row():
    flat = NodulePoints(left=(2, 4), right=(8, 4), top=(5, 4), bottom=(5, 4))
    mask = quadrilateral_mask(flat, 10, 10)
    assert mask[4, 2:9].all()
    assert mask.sum() == 7


def test_out_of_bounds_point_rejected():
    bad = NodulePoints(left=(-1, 5), right=(8, 5), top=(5, 2), bottom=(5, 8))
    with pytest.raises(InvalidInputError):
        bounding_box_mask(bad, 10, 10)
    with pytest.raises(InvalidInputError):
        quadrilateral_mask(bad, 10, 10)


def test_swapped_extremes_rejected():
    swapped = NodulePoints(left=(8, 5), right=(2, 5), top=(5, 2), bottom=(5, 8))
    with pytest.raises(InvalidInputError):
        swapped.validate(10, 10)


def test_malformed_points_rejected():
    with pytest.raises(InvalidInputError):
        NodulePoints.from_dict({"left": [1, 2], "right": [3]})


def test_complement_is_an_involution():
    box = bounding_box_mask(DIAMOND, 10, 10)
    out = complement_mask(box)
    assert out.sum() == 51
    np.testing.assert_array_equal(complement_mask(out), box)


def test_fusion_with_quadrilateral_as_prompt():
    g_b = bounding_box_mask(DIAMOND, 10, 10)
    g_i = quadrilateral_mask(DIAMOND, 10, 10)
    g_o = complement_mask(g_b)
    bundle = fuse_labels(g_b, g_i, g_o, g_i)
    np.testing.assert_array_equal(bundle.foreground, g_i)
    np.testing.assert_array_equal(bundle.location, g_b)
    np.testing.assert_array_equal(bundle.background, g_o)


def test_fusion_with_empty_prompt_warns(caplog):
    g_b = bounding_box_mask(DIAMOND, 10, 10)
    g_i = quadrilateral_mask(DIAMOND, 10, 10)
    with caplog.at_level(logging.WARNING, logger="nodseg"):
        bundle = fuse_labels(g_b, g_i, ~g_b, np.zeros((10, 10), dtype=bool), image_id="00003")
    assert not bundle.foreground.any()
    np.testing.assert_array_equal(bundle.location, g_b)
    assert "00003" in caplog.text


def test_fusion_matches_boolean_oracle(rng):
    for _ in range(50):
        g_b, g_i, g_o, y = (rng.random((9, 11)) < 0.5 for _ in range(4))
        bundle = fuse_labels(g_b, g_i, g_o, y)
        np.testing.assert_array_equal(bundle.location, g_b | y)
        np.testing.assert_array_equal(bundle.foreground, g_i & y)
        np.testing.assert_array_equal(bundle.background, g_o & ~y)


def test_fusion_invariants_on_random_annotations(rng):
    for i in range(1000):
        ann = PointAnnotation(f"{i:05d}", [_random_points(rng, 16, 16)])
        y = rng.random((16, 16)) < rng.random()
        g_b, g_i, _ = geometric_masks(ann, 16, 16)
        bundle = multi_nodule_fuse(ann, y, 16, 16)
        assert bundle.violations() == []
        assert not (bundle.foreground & ~g_i).any()
        assert not (bundle.foreground & ~y).any()
        assert not (bundle.background & y).any()
        assert (bundle.location >= g_b).all() and (bundle.location >= y).all()
        assert bundle.equals(multi_nodule_fuse(ann, y, 16, 16))


def test_fusion_rejects_mismatched_shapes():
    with pytest.raises(InvalidInputError):
        fuse_labels(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5)))


def test_two_nodules_union_their_boxes():
    a = NodulePoints(left=(1, 2), right=(3, 2), top=(2, 1), bottom=(2, 3))
    b = NodulePoints(left=(6, 7), right=(8, 7), top=(7, 6), bottom=(7, 8))
    ann = PointAnnotation("pair", [a, b])
    g_b, _, g_o = geometric_masks(ann, 10, 10)
    np.testing.assert_array_equal(g_b, bounding_box_mask(a, 10, 10) | bounding_box_mask(b, 10, 10))
    np.testing.assert_array_equal(g_o, ~g_b)
    single = multi_nodule_fuse(PointAnnotation("one", [a]), np.zeros((10, 10), dtype=bool), 10, 10)
    np.testing.assert_array_equal(single.location, bounding_box_mask(a, 10, 10))


def test_label_modes():
    ann = PointAnnotation("d", [DIAMOND])
    y = np.zeros((10, 10), dtype=bool)
    y[4:7, 4:7] = True
    topo = label_bundle("T", ann, None, 10, 10)
    np.testing.assert_array_equal(topo.foreground, quadrilateral_mask(DIAMOND, 10, 10))
    prompted = label_bundle("M", ann, y, 10, 10)
    np.testing.assert_array_equal(prompted.location, y)
    np.testing.assert_array_equal(prompted.background, ~y)
    fused = label_bundle("H", ann, y, 10, 10)
    np.testing.assert_array_equal(fused.foreground, y)
    with pytest.raises(InvalidInputError):
        label_bundle("M", ann, None, 10, 10)
    with pytest.raises(InvalidInputError):
        label_bundle("X", ann, y, 10, 10)


def test_label_precision_examples():
    gt = np.zeros((4, 4), dtype=bool)
    gt[0, :3] = True
    label = np.zeros((4, 4), dtype=bool)
    label[0, :] = True
    assert label_precision(label, gt) == pytest.approx(0.75)
    assert label_precision(gt, gt) == 1.0
    assert label_precision(~gt, gt) == 0.0
    assert label_precision(label, gt, as_background=True) == pytest.approx(0.25)
    with pytest.raises(UndefinedMetricError):
        label_precision(np.zeros((4, 4), dtype=bool), gt)


class _Sample:
    def __init__(self, annotation, gt, prompt_mask):
        self.annotation = annotation
        self.gt = gt
        self.prompt_mask = prompt_mask


def test_generator_keeps_order_and_reports_failures(tmp_path):
    gt = quadrilateral_mask(DIAMOND, 10, 10)
    samples = [_Sample(PointAnnotation(f"{i:05d}", [DIAMOND]), gt, gt) for i in range(5)]
    samples.insert(2, _Sample(None, gt, gt))
    results = LabelGenerator("H", workers=3).run(samples)
    assert [r.image_id for r in results["records"]] == [f"{i:05d}" for i in range(5)]
    assert len(results["errors"]) == 1

    table = results["precision"]
    assert [row["label"] for row in table] == [
        "Ex-/Out-rectangle", "In-quadrilateral", "Prompted mask", "High-confidence f/b"]
    fused = table[3]
    assert fused["foreground"]["mean"] == 1.0 and fused["foreground"]["n"] == 5
    assert fused["background"]["mean"] == 1.0

    assert write_bundles(results["records"], tmp_path) == 5
    np.testing.assert_array_equal(read_mask(tmp_path / "00000_foreground.png"), gt)


def test_precision_table_counts_empty_labels():
    gt = quadrilateral_mask(DIAMOND, 10, 10)
    empty = np.zeros((10, 10), dtype=bool)
    results = LabelGenerator("H", workers=1).run([_Sample(PointAnnotation("e", [DIAMOND]), gt, empty)])
    fused = precision_table(results["records"])[3]
    assert fused["foreground"]["undefined"] == 1
    assert fused["foreground"]["mean"] is None
