import json
import math

import numpy as np
import pytest
from PIL import Image

from fecnet import autodiff as ad
from fecnet.checkpoint import read_checkpoint, save_checkpoint
from fecnet.cli import (EXIT_CHECK, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, parse_config_text,
                        resolve_config)
from fecnet.errors import ConfigurationError
from fecnet.model import build_model, fec_micro
from fecnet.synthetic import half_color_image, write_mnist_idx


@pytest.fixture(scope="module")
def tiny_mnist(tmp_path_factory):
    return write_mnist_idx(tmp_path_factory.mktemp("mnist"), n_train=48, n_test=16, seed=3)


def write_config(path, **entries):
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))
    return path


@pytest.fixture(scope="module")
def trained(tiny_mnist, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = write_config(out / "run.cfg", data=tiny_mnist, epochs=1, batch_size=16,
                       warmup_epochs=0, seed=1)
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    return out


# -- configuration ----------------------------------------------------------------

def test_config_parsing_and_resolution():
    raw = parse_config_text("# comment\nepochs = 3  # trailing\ninput_size = 64x64\nhflip = yes\n")
    run = resolve_config(raw, {"seed": "9"})
    assert run.train.epochs == 3 and run.train.hflip is True
    assert run.model.input_size == (64, 64)
    assert run.model.seed == 9 == run.train.seed
    assert "epochs = 3" in run.render().splitlines()


@pytest.mark.parametrize("text", ["depth = 3\n", "epochs = 2\nepochs = 3\n", "epochs\n"])
def test_bad_config_text(text):
    with pytest.raises(ConfigurationError):
        parse_config_text(text)


def test_missing_or_unknown_config_exits_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == EXIT_USAGE
    cfg = write_config(tmp_path / "bad.cfg", learning_rate=1)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "learning_rate" in capsys.readouterr().err


# -- train / eval -----------------------------------------------------------------

def test_train_writes_run_directory(trained):
    lines = (trained / "metrics.log").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("epoch=1 ")
    assert "seed = 1" in (trained / "config.resolved").read_text()
    assert (trained / "train.log").read_text()
    config, meta, _ = read_checkpoint(trained / "checkpoint.fecw")
    assert config["seed"] == 1
    assert set(meta) >= {"normalization", "build", "train_config", "final"}


def test_eval_prints_metrics(trained, tiny_mnist, capsys):
    assert main(["eval", str(trained / "checkpoint.fecw"), str(tiny_mnist)]) == EXIT_OK
    out = capsys.readouterr().out.strip()
    fields = dict(part.split("=") for part in out.split())
    assert fields["count"] == "16" and 0.0 <= float(fields["top1"]) <= 1.0


def test_constant_logits_eval_is_chance(tiny_mnist, tmp_path, capsys):
    model = build_model(fec_micro())
    model.head["weight"].data[...] = 0
    model.head["bias"].data[...] = 0
    model.meta = {"normalization": {"mean": [0.1] * 3, "std": [0.3] * 3}}
    save_checkpoint(model, tmp_path / "c.fecw")
    assert main(["eval", str(tmp_path / "c.fecw"), str(tiny_mnist)]) == EXIT_OK
    fields = dict(part.split("=") for part in capsys.readouterr().out.split())
    labels = np.frombuffer((tiny_mnist / "t10k-labels-idx1-ubyte").read_bytes()[8:], np.uint8)
    # all logits tie, so every prediction is class 0
    assert float(fields["top1"]) == pytest.approx(np.mean(labels == 0), abs=1e-6)
    assert float(fields["loss"]) == pytest.approx(math.log(10), rel=1e-5)


def test_missing_checkpoint_exits_2(tmp_path, tiny_mnist):
    assert main(["eval", str(tmp_path / "none.fecw"), str(tiny_mnist)]) == EXIT_USAGE


def test_corrupt_checkpoint_exits_2(trained, tmp_path, tiny_mnist):
    blob = bytearray((trained / "checkpoint.fecw").read_bytes())
    blob[100] ^= 1
    (tmp_path / "bad.fecw").write_bytes(bytes(blob))
    assert main(["eval", str(tmp_path / "bad.fecw"), str(tiny_mnist)]) == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_run_exits_3(tiny_mnist, tmp_path, capsys):
    cfg = write_config(tmp_path / "hot.cfg", data=tiny_mnist, epochs=1, batch_size=16,
                       warmup_epochs=0, base_lr=1e30, seed=0)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_NUMERIC
    assert "non-finite" in capsys.readouterr().err


# -- segment ----------------------------------------------------------------------

@pytest.fixture()
def image_file(tmp_path):
    path = tmp_path / "half.png"
    Image.fromarray(half_color_image(64)[0]).save(path)
    return path


def test_segment_outputs_are_reproducible(trained, image_file, tmp_path):
    ckpt = str(trained / "checkpoint.fecw")
    for name in ("a", "b"):
        assert main(["segment", ckpt, str(image_file), "--out", str(tmp_path / name),
                     "--level", "1", "--level", "3", "--k", "2"]) == EXIT_OK
    for f in ("assignments.json", "segments_level1.json", "segments_level3.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    dump = json.loads((tmp_path / "a" / "segments_level3.json").read_text())
    assert sum(s["pixel_count"] for s in dump["segments"]) == 64 * 64
    assert Image.open(tmp_path / "a" / "overlay_level1.png").size == (64, 64)


def test_segment_k1_is_one_colour(trained, image_file, tmp_path):
    assert main(["segment", str(trained / "checkpoint.fecw"), str(image_file), "--out",
                 str(tmp_path / "o"), "--level", "2", "--k", "1"]) == EXIT_OK
    dump = json.loads((tmp_path / "o" / "segments_level2.json").read_text())
    assert len(dump["segments"]) == 1
    assert np.unique(np.array(dump["labels"])).size == 1


@pytest.mark.parametrize("level", ["0", "4"])
def test_segment_level_out_of_range(trained, image_file, tmp_path, level):
    assert main(["segment", str(trained / "checkpoint.fecw"), str(image_file), "--out",
                 str(tmp_path / "o"), "--level", level]) == EXIT_USAGE


# -- gradcheck / inspect ----------------------------------------------------------

def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "0"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len([ln for ln in lines if ln.startswith("encode.")]) == 6
    assert len([ln for ln in lines if ln.startswith("pool.")]) == 3


def test_gradcheck_catches_a_broken_rule(monkeypatch, capsys):
    honest = ad.sigmoid

    def doubled(x):
        out = honest(x)
        rule = out._backward
        if rule is not None:
            out._backward = lambda g: rule(2 * g)
        return out

    monkeypatch.setattr(ad, "sigmoid", doubled)
    assert main(["gradcheck"]) == EXIT_CHECK
    out = capsys.readouterr().out
    assert "encode.alpha" in out.split("gradient check failed:")[1]


def test_inspect_checkpoint_and_config(trained, capsys):
    assert main(["inspect", str(trained / "checkpoint.fecw")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "stage grids 16x16 8x8 4x4 2x2" in out and "head.weight float32" in out
    assert main(["inspect", str(trained / "run.cfg")]) == EXIT_OK
    assert "parameters " in capsys.readouterr().out
