import gzip
import math
import struct

import numpy as np
import pytest

from fecnet import autodiff as ad
from fecnet.autodiff import Tensor
from fecnet.errors import ConfigurationError, DomainError, FormatError, NonFiniteError
from fecnet.model import build_model, fec_micro
from fecnet.training import (AdamW, Dataset, TrainConfig, WarmupCosine, channel_stats, evaluate,
                             fit, fit_to_size, load_dataset, prepare_images, read_idx,
                             train_step, write_idx)


def write_mnist_pair(root, images, labels, prefix="train"):
    write_idx(root / f"{prefix}-images-idx3-ubyte", images)
    write_idx(root / f"{prefix}-labels-idx1-ubyte", labels)


# -- idx files / datasets -----------------------------------------------------------

def test_idx_header_layout(tmp_path):
    images = np.arange(4 * 28 * 28, dtype=np.uint8).reshape(4, 28, 28)
    write_idx(tmp_path / "x", images)
    raw = (tmp_path / "x").read_bytes()
    assert struct.unpack(">I", raw[:4])[0] == 0x00000803
    assert struct.unpack(">3I", raw[4:16]) == (4, 28, 28)
    assert len(raw) == 16 + 4 * 28 * 28
    np.testing.assert_array_equal(read_idx(tmp_path / "x"), images)


def test_four_images_replicate_to_three_channels(tmp_path):
    rng = np.random.default_rng(0)
    write_mnist_pair(tmp_path, rng.integers(0, 256, (4, 28, 28), dtype=np.uint8),
                     np.array([0, 1, 2, 3], np.uint8))
    ds = load_dataset(tmp_path)
    assert ds.images.shape == (4, 3, 28, 28) and len(ds) == 4
    np.testing.assert_array_equal(ds.images[:, 0], ds.images[:, 2])


def test_gzip_files_load(tmp_path):
    images = np.zeros((2, 5, 5), np.uint8)
    header = struct.pack(">HBB3I", 0, 8, 3, 2, 5, 5)
    with gzip.open(tmp_path / "t10k-images-idx3-ubyte.gz", "wb") as fh:
        fh.write(header + images.tobytes())
    write_idx(tmp_path / "t10k-labels-idx1-ubyte.gz", np.array([1, 1], np.uint8))
    assert len(load_dataset(tmp_path, split="test")) == 2


def test_label_out_of_range(tmp_path):
    write_mnist_pair(tmp_path, np.zeros((2, 4, 4), np.uint8), np.array([0, 10], np.uint8))
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_bad_magic_and_size(tmp_path):
    write_mnist_pair(tmp_path, np.zeros((2, 4, 4), np.uint8), np.array([0, 1], np.uint8))
    # swap roles: labels file where the images file should be
    (tmp_path / "train-images-idx3-ubyte").write_bytes(
        (tmp_path / "train-labels-idx1-ubyte").read_bytes())
    with pytest.raises(FormatError, match="magic"):
        load_dataset(tmp_path)
    (tmp_path / "x").write_bytes(struct.pack(">HBB3I", 0, 8, 3, 2, 4, 4) + bytes(5))
    with pytest.raises(FormatError, match="payload"):
        read_idx(tmp_path / "x")
    (tmp_path / "y").write_bytes(b"\x01\x02\x08\x01" + bytes(8))
    with pytest.raises(FormatError, match="magic"):
        read_idx(tmp_path / "y")


def test_count_mismatch(tmp_path):
    write_mnist_pair(tmp_path, np.zeros((3, 4, 4), np.uint8), np.array([0, 1], np.uint8))
    with pytest.raises(FormatError):
        load_dataset(tmp_path)


def test_constant_images_normalise_to_zero():
    raw = np.full((5, 6, 6), 77, np.uint8)
    x, mean, std = prepare_images(raw)
    np.testing.assert_allclose(mean, 77 / 255, rtol=1e-6)
    np.testing.assert_array_equal(std, 1.0)
    np.testing.assert_allclose(x, 0.0, atol=1e-7)


def test_channel_stats_direct():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3, 5, 5))
    mean, std = channel_stats(x)
    for c in range(3):
        vals = x[:, c].ravel()
        assert abs(mean[c] - vals.mean()) < 1e-12
        assert abs(std[c] - math.sqrt(((vals - vals.mean()) ** 2).mean())) < 1e-12


def test_eval_split_uses_training_stats(tmp_path):
    rng = np.random.default_rng(2)
    write_mnist_pair(tmp_path, rng.integers(0, 256, (6, 8, 8), dtype=np.uint8), np.zeros(6, np.uint8))
    write_mnist_pair(tmp_path, rng.integers(0, 50, (3, 8, 8), dtype=np.uint8), np.zeros(3, np.uint8),
                     prefix="t10k")
    train = load_dataset(tmp_path)
    test = load_dataset(tmp_path, split="test", stats=train.stats())
    np.testing.assert_array_equal(test.mean, train.mean)
    assert test.images.mean() < 0  # darker than the training mean


def test_fit_to_size_upsamples_and_pads_with_fill():
    x = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2)
    out = fit_to_size(x, (7, 7), np.array([-1.0], np.float32))
    assert out.shape == (1, 1, 7, 7)
    # factor 3 nearest neighbour upsample; the odd leftover row/column is filled
    np.testing.assert_array_equal(out[0, 0, 6], -1.0)
    np.testing.assert_array_equal(out[0, 0, :, 6], -1.0)
    np.testing.assert_array_equal(out[0, 0, 0:3, 0:3], 0.0)
    np.testing.assert_array_equal(out[0, 0, 3:6, 3:6], 3.0)


def test_dataset_batch_resizes_lazily(tmp_path):
    write_mnist_pair(tmp_path, np.zeros((3, 28, 28), np.uint8), np.array([0, 1, 2], np.uint8))
    ds = load_dataset(tmp_path, size=64)
    assert ds.images.shape == (3, 3, 28, 28)
    b = ds.batch(np.array([2, 0]))
    assert b.shape == (2, 3, 64, 64) and b.flags.writeable


def test_image_directory(tmp_path):
    from PIL import Image

    for cls, colour in (("cat", (255, 0, 0)), ("dog", (0, 0, 255))):
        (tmp_path / cls).mkdir()
        for i in range(2):
            Image.new("RGB", (8, 8), colour).save(tmp_path / cls / f"{i}.png")
    ds = load_dataset(tmp_path, format="image_directory", num_classes=2)
    assert ds.images.shape == (4, 3, 8, 8)
    assert ds.labels.tolist() == [0, 0, 1, 1]


# -- schedule and optimiser -------------------------------------------------------

def test_schedule_shape():
    sched = WarmupCosine(1e-3, total_steps=100, warmup_steps=10)
    lrs = [sched(i) for i in range(101)]
    assert all(b >= a for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(b <= a for a, b in zip(lrs[10:], lrs[11:]))
    assert abs(sched(9) - sched(10)) < 1e-9
    assert sched(100) == 0.0
    assert sched(10) == pytest.approx(1e-3)


def test_quadratic_bowl_converges():
    target = np.array([1.5, -2.0, 0.25])
    w = Tensor(np.zeros(3), requires_grad=True)
    opt = AdamW({"w": w}, weight_decay=0.0)
    for step in range(500):
        w.zero_grad()
        diff = ad.sub(w, Tensor(target))
        ad.backward(ad.reduce_sum(ad.mul(diff, diff)))
        opt.step(0.05 * (1 - step / 500) + 1e-3)
    assert np.abs(w.data - target).max() < 1e-3


def test_decoupled_decay_with_zero_gradient():
    w = Tensor(np.full((2, 2), 3.0), requires_grad=True)
    b = Tensor(np.full(2, 3.0), requires_grad=True)
    w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
    opt = AdamW({"w": w, "b": b}, weight_decay=0.05)
    opt.step(0.1)
    np.testing.assert_allclose(w.data, 3.0 * (1 - 0.1 * 0.05), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(b.data, 3.0)  # vectors are not decayed


def test_train_config_validation():
    TrainConfig().validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=2, warmup_epochs=2).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(base_lr=0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(beta1=1.0).validate()


# -- steps and evaluation ---------------------------------------------------------

def separable_set(n=64, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    images = rng.normal(0, 0.3, size=(n, 3, 64, 64)).astype(np.float32)
    images[labels == 1, 0] += 1.0
    images[labels == 0, 2] += 1.0
    return images, labels


def test_fifty_steps_shrink_the_loss():
    images, labels = separable_set()
    model = build_model(fec_micro(num_classes=2, seed=1))
    opt = AdamW(model.named_parameters(), weight_decay=0.05)
    losses = [train_step(model, images, labels, opt, 2e-3) for _ in range(50)]
    assert losses[-1] < 0.1 * losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_names_the_culprit():
    images, labels = separable_set(8)
    model = build_model(fec_micro(num_classes=2))
    model.stem["weight"].data[0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="stem"):
        train_step(model, images, labels, AdamW(model.named_parameters()), 1e-3)


def constant_dataset(k=4, per_class=5):
    labels = np.repeat(np.arange(k), per_class)
    images = np.zeros((len(labels), 3, 64, 64), np.float32)
    return Dataset(images, labels, "test", k, np.zeros(3), np.ones(3))


def test_constant_logits_give_chance_accuracy():
    model = build_model(fec_micro(num_classes=4))
    model.head["weight"].data[...] = 0
    model.head["bias"].data[...] = 0
    res = evaluate(model, constant_dataset())
    assert res.top1 == 0.25
    assert res.loss == pytest.approx(math.log(4), rel=1e-6)


def test_perfect_logits_give_full_accuracy():
    ds = constant_dataset(k=3, per_class=2)
    model = build_model(fec_micro(num_classes=3))

    def oracle(batch, record_assignments=False, check_finite=False):
        n = len(batch)
        logits = np.full((n, 3), -5.0)
        logits[np.arange(n), ds.labels[:n]] = 5.0
        return Tensor(logits), None

    model.forward = oracle
    assert evaluate(model, ds).top1 == 1.0


def test_empty_dataset_rejected():
    ds = constant_dataset().subset(slice(0, 0))
    with pytest.raises(DomainError):
        evaluate(build_model(fec_micro(num_classes=4)), ds)


def test_fit_is_seed_reproducible():
    images, labels = separable_set(32, seed=3)
    ds = Dataset(images, labels, "train", 2, np.zeros(3), np.ones(3))
    cfg = TrainConfig(epochs=2, batch_size=16, warmup_epochs=0.5, seed=5)
    curves = []
    for _ in range(2):
        model = build_model(fec_micro(num_classes=2, seed=5))
        steps = []
        fit(model, ds, cfg, on_step=lambda i, loss: steps.append(loss))
        curves.append(steps)
    assert curves[0] == curves[1] and len(curves[0]) == 4


def test_epoch_metrics_line():
    images, labels = separable_set(16, seed=4)
    ds = Dataset(images, labels, "train", 2, np.zeros(3), np.ones(3))
    hist = fit(build_model(fec_micro(num_classes=2)), ds, TrainConfig(epochs=1, batch_size=16,
                                                                      warmup_epochs=0), val=ds)
    line = hist[0].line()
    assert line.startswith("epoch=1 lr=") and "train_loss=" in line and "val_top1=" in line
