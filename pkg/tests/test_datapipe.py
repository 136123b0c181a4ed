import json
import logging

import numpy as np
import pytest
from scipy import ndimage

from nodseg.datapipe import (
    Corpus,
    NoduleShape,
    SynthConfig,
    extreme_points,
    gen_sample,
    generate_corpus,
    images_only,
    load_corpus,
    load_real_dataset,
    render_image,
    simulate_prompt_mask,
    write_corpus,
)
from nodseg.errors import ConfigError, IngestionError, InvalidInputError
from nodseg.labelgen import LabelGenerator, bounding_box_mask, label_precision
from nodseg.utils import write_image, write_mask


@pytest.fixture(scope="module")
def benchmark_corpus():
    return generate_corpus(SynthConfig(n_train=200, n_test=0), workers=4)


def _rect(h, w, rows, cols):
    mask = np.zeros((h, w), dtype=bool)
    mask[rows[0]:rows[1], cols[0]:cols[1]] = True
    return mask


def test_samples_are_deterministic(small_synth):
    a = gen_sample(small_synth, 3)
    b = gen_sample(small_synth, 3)
    assert a.equals(b)
    assert not a.equals(gen_sample(small_synth, 4))
    assert a.image_id == "00003"


def test_corpus_order_ignores_thread_count(small_synth):
    one = generate_corpus(small_synth, workers=1)
    many = generate_corpus(small_synth, workers=4)
    assert [s.image_id for s in one.train] == [f"{i:05d}" for i in range(6)]
    assert all(x.equals(y) for x, y in zip(one.split("all"), many.split("all")))
    assert len(one.test) == 3


def test_ellipse_rasterization_matches_inside_test():
    shape = NoduleShape(cy=15.0, cx=17.0, a=9.0, b=5.0, theta=0.6)
    mask = shape.rasterize(32, 32)
    for y in range(32):
        for x in range(32):
            dx, dy = x - 17.0, y - 15.0
            u = (dx * np.cos(0.6) + dy * np.sin(0.6)) / 9.0
            v = (-dx * np.sin(0.6) + dy * np.cos(0.6)) / 5.0
            assert mask[y, x] == (np.hypot(u, v) <= 1.0)


def test_zero_speckle_ellipse_sample():
    cfg = SynthConfig(size=32, shape="ellipse", radius_min=5.0, radius_max=9.0, speckle=0.0)
    sample = gen_sample(cfg, 0)
    (shape,) = sample.shapes
    np.testing.assert_array_equal(sample.gt, shape.rasterize(32, 32))


def test_nodule_is_darker_than_background(rng):
    cfg = SynthConfig(size=32, radius_min=5.0, radius_max=9.0, speckle=0.0, blur_sigma=0.0)
    gt = _rect(32, 32, (8, 20), (10, 22))
    image = render_image(gt, cfg, rng)
    assert image[gt].mean() < image[~gt].mean()
    noisy = render_image(gt, SynthConfig(size=32, radius_min=5.0, radius_max=9.0), rng)
    np.testing.assert_allclose(noisy * 255.0, np.round(noisy * 255.0), atol=1e-9)
    assert noisy.min() >= 0.0 and noisy.max() <= 1.0


def test_extreme_points_of_rectangle():
    gt = _rect(10, 10, (2, 6), (3, 8))
    (nodule,) = extreme_points(gt).nodules
    assert nodule.left == (3, 2)
    assert nodule.right == (7, 2)
    assert nodule.top == (3, 2)
    assert nodule.bottom == (3, 5)
    assert extreme_points(gt).nodules == extreme_points(gt).nodules


def test_extreme_points_of_single_pixel():
    gt = np.zeros((6, 6), dtype=bool)
    gt[4, 1] = True
    (nodule,) = extreme_points(gt).nodules
    assert nodule.left == nodule.right == nodule.top == nodule.bottom == (1, 4)


def test_exact_points_span_the_tight_box(benchmark_corpus):
    for sample in benchmark_corpus.train[:50]:
        ann = extreme_points(sample.gt, image_id=sample.image_id)
        labels, _ = ndimage.label(sample.gt, structure=np.ones((3, 3), dtype=bool))
        box = np.zeros_like(sample.gt)
        for window in ndimage.find_objects(labels):
            box[window] = True
        union = np.zeros_like(sample.gt)
        for nodule in ann.nodules:
            union |= bounding_box_mask(nodule, *sample.gt.shape)
        np.testing.assert_array_equal(union, box)


def test_jittered_points_stay_valid(rng):
    gt = _rect(16, 16, (0, 5), (11, 16))
    for _ in range(100):
        ann = extreme_points(gt, jitter=2, rng=rng)
        ann.validate(16, 16)


def test_extreme_points_errors():
    with pytest.raises(InvalidInputError):
        extreme_points(np.zeros((4, 4), dtype=bool))
    with pytest.raises(InvalidInputError):
        extreme_points(_rect(4, 4, (1, 2), (1, 2)), jitter=1)


def test_noiseless_prompt_is_ground_truth(rng):
    cfg = SynthConfig(oracle_precision=1.0, oracle_recall=1.0, oracle_spread=0.0)
    gt = _rect(64, 64, (10, 30), (20, 40))
    np.testing.assert_array_equal(simulate_prompt_mask(gt, cfg, rng), gt)


def test_growing_prompt_keeps_full_recall(rng):
    cfg = SynthConfig(oracle_precision=0.8, oracle_recall=1.0, oracle_spread=0.0)
    gt = _rect(64, 64, (10, 30), (20, 40))
    mask = simulate_prompt_mask(gt, cfg, rng)
    assert (mask >= gt).all()
    assert label_precision(mask, gt) == pytest.approx(0.8, abs=0.01)


def test_prompt_precision_near_target(benchmark_corpus):
    values = [label_precision(s.prompt_mask, s.gt) for s in benchmark_corpus.train]
    assert abs(np.mean(values) - 0.96) <= 0.05


def test_fused_foreground_is_most_precise(benchmark_corpus):
    table = LabelGenerator("H", workers=4).run(benchmark_corpus.train)["precision"]
    rows = {row["label"]: row["foreground"]["mean"] for row in table}
    fused = rows["High-confidence f/b"]
    assert fused > rows["In-quadrilateral"]
    assert fused > rows["Prompted mask"]


def test_prompt_flips_stay_in_thin_morphological_bands(rng):
    gt = _rect(64, 64, (20, 40), (20, 40))
    cross = ndimage.generate_binary_structure(2, 1)
    grown = simulate_prompt_mask(gt, SynthConfig(oracle_precision=0.9, oracle_recall=1.0, oracle_spread=0.0,
                                                 morph_radius=1), rng)
    assert (grown <= ndimage.binary_dilation(gt, structure=cross)).all()
    assert grown.sum() > gt.sum()

    shrunk = simulate_prompt_mask(gt, SynthConfig(oracle_precision=1.0, oracle_recall=0.9, oracle_spread=0.0,
                                                  morph_radius=1), rng)
    assert (shrunk >= ndimage.binary_erosion(gt, structure=cross)).all()
    assert int(shrunk.sum()) == 360


def test_prompt_band_widens_when_too_thin(rng):
    gt = _rect(32, 32, (13, 19), (13, 19))
    cfg = SynthConfig(oracle_precision=0.5, oracle_recall=1.0, oracle_spread=0.0, morph_radius=1)
    mask = simulate_prompt_mask(gt, cfg, rng)
    assert int(mask.sum()) == 72
    assert label_precision(mask, gt) == pytest.approx(0.5)
    cross = ndimage.generate_binary_structure(2, 1)
    assert (mask & ~ndimage.binary_dilation(gt, structure=cross)).any()


def test_prompt_recall_near_target(benchmark_corpus):
    recalls = [(s.prompt_mask & s.gt).sum() / s.gt.sum() for s in benchmark_corpus.train]
    assert abs(np.mean(recalls) - 0.95) <= 0.05


def test_fused_background_is_nearly_clean(benchmark_corpus):
    table = LabelGenerator("H", workers=4).run(benchmark_corpus.train)["precision"]
    rows = {row["label"]: row["background"]["mean"] for row in table}
    assert rows["High-confidence f/b"] >= 0.99


def test_corpus_round_trip(tmp_path, small_synth):
    corpus = generate_corpus(small_synth, workers=2)
    root = write_corpus(corpus, tmp_path / "synth")
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["splits"]["test"] == ["00006", "00007", "00008"]

    loaded = load_corpus(root)
    assert loaded.config == small_synth
    assert len(loaded.train) == 6 and len(loaded.test) == 3
    for original, read in zip(corpus.split("all"), loaded.split("all")):
        assert original.equals(read)


def test_load_without_manifest_puts_everything_in_test(tmp_path, small_synth):
    root = write_corpus(generate_corpus(small_synth), tmp_path / "plain")
    (root / "manifest.json").unlink()
    loaded = load_corpus(root)
    assert loaded.train == []
    assert len(loaded.test) == 9


def test_missing_mask_is_skipped(tmp_path, caplog):
    write_image(tmp_path / "images" / "a.png", np.full((8, 8), 0.5))
    write_image(tmp_path / "images" / "b.png", np.full((8, 8), 0.5))
    write_mask(tmp_path / "masks" / "a.png", _rect(8, 8, (2, 5), (2, 5)))
    with caplog.at_level(logging.WARNING, logger="nodseg"):
        samples = load_real_dataset(tmp_path)
    assert [s.image_id for s in samples] == ["a"]
    assert samples[0].prompt_mask is None and samples[0].annotation is None
    assert "b.png" in caplog.text


def test_empty_directory_gives_no_samples(tmp_path):
    assert load_real_dataset(tmp_path) == []
    assert load_corpus(tmp_path).split("all") == []


def test_unreadable_files_raise_with_path(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    (tmp_path / "images" / "x.png").write_bytes(b"not an image")
    write_mask(tmp_path / "masks" / "x.png", np.zeros((4, 4), dtype=bool))
    with pytest.raises(IngestionError) as info:
        load_real_dataset(tmp_path)
    assert info.value.path.endswith("x.png")


def test_shape_mismatch_raises(tmp_path):
    write_image(tmp_path / "images" / "a.png", np.zeros((8, 8)))
    write_mask(tmp_path / "masks" / "a.png", np.zeros((8, 6), dtype=bool))
    with pytest.raises(IngestionError):
        load_real_dataset(tmp_path)


def test_images_only_strips_prompts(small_synth):
    corpus = Corpus(test=[gen_sample(small_synth, 0), gen_sample(small_synth, 1)])
    images, gts, ids = images_only(corpus.test)
    assert ids == ["00000", "00001"]
    assert images[0].shape == gts[0].shape == (32, 32)
    with pytest.raises(InvalidInputError):
        corpus.split("validation")


@pytest.mark.parametrize("overrides", [
    {"size": 30},
    {"size": 36, "radius_max": 17.0},
    {"shape": "star"},
    {"oracle_precision": 0.0},
    {"bg_mean": 0.1, "contrast": 0.3},
    {"nodules_min": 2, "nodules_max": 1},
    {"morph_radius": 0},
])
def test_synth_config_validation(overrides):
    with pytest.raises(ConfigError):
        SynthConfig(**overrides)


def test_synth_config_round_trip():
    cfg = SynthConfig(size=48, shape="ellipse", seed=9)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"colour": 1})
