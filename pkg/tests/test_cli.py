import json
import logging

import pytest
from PIL import Image

from nodseg.cli import main
from nodseg.tinynet import Checkpoint, init_params

SMALL = ["--set", "synth.size=32", "--set", "synth.radius_min=5.0", "--set", "synth.radius_max=9.0",
         "--set", "synth.n_train=4", "--set", "synth.n_test=2"]


@pytest.fixture(autouse=True)
def reset_package_logger():
    yield
    logger = logging.getLogger("nodseg")
    logger.handlers.clear()
    logger.setLevel(logging.NOTSET)


@pytest.fixture
def corpus_dir(tmp_path):
    out = tmp_path / "corpus"
    assert main(["--no-rich", "gen-data", "--out", str(out), *SMALL]) == 0
    return out


def test_gen_data_writes_corpus(corpus_dir, capsys):
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    assert len(manifest["splits"]["train"]) == 4
    assert len(list((corpus_dir / "images").iterdir())) == 6
    assert "4 train / 2 test" in capsys.readouterr().out


def test_gen_labels(corpus_dir, tmp_path, capsys):
    save = tmp_path / "precision.json"
    code = main(["--no-rich", "gen-labels", "--corpus", str(corpus_dir), "--mode", "H",
                 "--out", str(tmp_path / "bundles"), "--save", str(save)])
    assert code == 0
    assert "High-confidence f/b" in capsys.readouterr().out
    assert json.loads(save.read_text())["mode"] == "H"
    assert len(list((tmp_path / "bundles").glob("*_foreground.png"))) == 6


def test_gradcheck_subset(capsys):
    assert main(["--no-rich", "gradcheck", "--only", "projection,topo", "--instances", "1"]) == 0
    assert "All gradient checks passed." in capsys.readouterr().out


def test_train_eval_render(corpus_dir, tmp_path, output_root, capsys):
    code = main(["--no-rich", "train", "--corpus", str(corpus_dir), "--epochs", "1", "--batch-size", "2",
                 "--workers", "2", "--set", "weights.samples_per_class=8"])
    assert code == 0
    checkpoint = output_root / "E3_s0" / "best.npz"
    assert checkpoint.is_file()

    code = main(["--no-rich", "eval", "--checkpoint", str(checkpoint), "--corpus", str(corpus_dir),
                 "--out", str(tmp_path / "eval")])
    assert code == 0
    assert (tmp_path / "eval" / "metrics.csv").is_file()

    code = main(["--no-rich", "render", "--checkpoint", str(checkpoint), "--corpus", str(corpus_dir),
                 "--limit", "1", "--out", str(tmp_path / "overlays")])
    assert code == 0
    assert len(list((tmp_path / "overlays").glob("*.png"))) == 1
    assert "Training summary" in capsys.readouterr().out


def test_eval_on_initial_weights(corpus_dir, tmp_path, capsys):
    path = Checkpoint(init_params(0)).save(tmp_path / "init.npz")
    assert main(["--no-rich", "eval", "--checkpoint", str(path), "--corpus", str(corpus_dir)]) == 0
    assert "Metrics on test split" in capsys.readouterr().out


def test_render_feature_panels(corpus_dir, tmp_path, capsys):
    path = Checkpoint(init_params(0)).save(tmp_path / "init.npz")
    out = tmp_path / "panels"
    code = main(["--no-rich", "render", "--checkpoint", str(path), "--corpus", str(corpus_dir),
                 "--limit", "2", "--features", "--out", str(out)])
    assert code == 0
    assert len(list(out.glob("*_overlay.png"))) == 2
    strips = sorted(out.glob("*_features.png"))
    assert len(strips) == 2
    assert Image.open(strips[0]).size == (32 * 6, 32)
    assert "feature panels" in capsys.readouterr().out


def test_missing_checkpoint_exits_with_error(corpus_dir, tmp_path, capsys):
    code = main(["--no-rich", "eval", "--checkpoint", str(tmp_path / "none.npz"), "--corpus", str(corpus_dir)])
    assert code == 1
    assert "Error:" in capsys.readouterr().out


def test_bad_override_exits_with_error(capsys):
    assert main(["--no-rich", "train", "--set", "weights.gamma=1"]) == 1
    assert "unknown config key" in capsys.readouterr().out


def test_argument_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["train", "--loss-mode", "Z"])
    assert info.value.code == 2
