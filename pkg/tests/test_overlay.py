import numpy as np
import pytest
from PIL import Image

from nodseg.errors import InvalidInputError
from nodseg.overlay import (
    FEATURE_PANELS,
    FN_COLOR,
    FP_COLOR,
    TP_COLOR,
    OverlayRenderer,
    feature_maps,
    feature_strip,
    overlay_rgb,
    render_overlay,
)


def _nodule():
    gt = np.zeros((16, 16), dtype=bool)
    gt[4:10, 5:12] = True
    return gt


def _count(rgb, color):
    return int(np.all(rgb == np.array(color, dtype=np.uint8), axis=-1).sum())


def test_perfect_prediction_is_red():
    gt = _nodule()
    rgb = overlay_rgb(np.zeros((16, 16)), gt, gt)
    assert _count(rgb, TP_COLOR) == gt.sum()
    assert _count(rgb, FN_COLOR) == 0 and _count(rgb, FP_COLOR) == 0


def test_empty_prediction_is_green():
    gt = _nodule()
    rgb = overlay_rgb(np.zeros((16, 16)), np.zeros_like(gt), gt)
    assert _count(rgb, FN_COLOR) == gt.sum()
    assert _count(rgb, TP_COLOR) == 0


def test_rendered_counts_match_confusion(tmp_path, rng):
    gt = _nodule()
    prob = rng.random((16, 16))
    renderer = OverlayRenderer(tmp_path / "overlays")
    result = renderer.render(np.full((16, 16), 0.5), prob, gt, "00001")
    pred = prob >= 0.5
    assert result["tp"] == (pred & gt).sum()
    assert result["fn"] == (~pred & gt).sum()
    assert result["fp"] == (pred & ~gt).sum()

    rgb = np.asarray(Image.open(result["filepath"]))
    assert rgb.shape == (16, 16, 3)
    assert _count(rgb, TP_COLOR) == result["tp"]
    assert _count(rgb, FN_COLOR) == result["fn"]
    assert _count(rgb, FP_COLOR) == result["fp"]
    assert (rgb[~(pred | gt)] == 128).all()


def test_shape_mismatch():
    with pytest.raises(InvalidInputError):
        overlay_rgb(np.zeros((8, 8)), np.zeros((16, 16), dtype=bool), _nodule())


def test_render_overlay_writes_png(tmp_path):
    gt = _nodule()
    image = np.full(gt.shape, 0.25)
    path = render_overlay(image, gt, gt, tmp_path / "sub" / "a.png")
    assert path.exists()
    rgb = np.asarray(Image.open(path).convert("RGB"))
    assert _count(rgb, TP_COLOR) == int(gt.sum())


def _two_region_features():
    F = np.zeros((2, 8, 8))
    F[0, 2:6, 2:6] = 1.0
    F[1] = 1.0 - F[0]
    return F


def test_feature_maps_split_foreground_from_background():
    F = _two_region_features()
    m = np.zeros((16, 16))
    m[4:12, 4:12] = 0.9
    maps = feature_maps(F, m)
    assert set(maps) == set(FEATURE_PANELS)
    assert all(v.shape == (16, 16) for v in maps.values())
    inside = np.zeros((16, 16), dtype=bool)
    inside[4:12, 4:12] = True
    np.testing.assert_allclose(maps["r_f"][inside], 1.0)
    np.testing.assert_allclose(maps["r_f"][~inside], 0.0)
    np.testing.assert_allclose(maps["m_c"][inside], 1.0)
    np.testing.assert_allclose(maps["m_c"][~inside], 0.0, atol=1e-7)
    np.testing.assert_allclose(maps["norm"], 1.0)


def test_feature_maps_without_foreground():
    maps = feature_maps(_two_region_features(), np.zeros((16, 16)))
    assert not maps["r_f"].any() and not maps["r_b"].any()
    np.testing.assert_allclose(maps["m_c"], 0.5)


def test_feature_strip_layout(tmp_path):
    F = _two_region_features()
    m = np.full((16, 16), 0.2)
    strip = feature_strip(np.full((16, 16), 0.5), F, m)
    assert strip.shape == (16, 16 * (len(FEATURE_PANELS) + 1), 3)
    assert (strip[:, :16] == 128).all()
    result = OverlayRenderer(tmp_path).render_features(np.full((16, 16), 0.5), F, m, "00003")
    assert result["panels"] == ["image", *FEATURE_PANELS]
    np.testing.assert_array_equal(np.asarray(Image.open(result["filepath"])), strip)
    with pytest.raises(InvalidInputError):
        feature_strip(np.zeros((8, 8)), F, m)
