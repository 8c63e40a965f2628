"""Desk-scale supervised training: data loading, AdamW, schedule, evaluation."""

from __future__ import annotations

import dataclasses
import gzip
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DomainError, FormatError, NonFiniteError
from .model import Model

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"),
              0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


# -- idx files --------------------------------------------------------------------

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Decode an idx file (optionally gzipped) into an array."""
    with _open(path) as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError(f"{path}: too short for an idx header")
    zero, type_code, ndim = struct.unpack(">HBB", blob[:4])
    if zero != 0 or type_code not in _IDX_TYPES or ndim < 1:
        raise FormatError(f"{path}: bad idx magic {blob[:4].hex()}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated idx header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    dtype = np.dtype(_IDX_TYPES[type_code])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - header != expected:
        raise FormatError(f"{path}: payload is {len(blob) - header} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError("only uint8 idx files are written")
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def _idx_magic(path) -> int:
    with _open(path) as fh:
        return struct.unpack(">I", fh.read(4))[0]


# -- datasets -----------------------------------------------------------------------

@dataclass
class Dataset:
    """Normalised images plus labels.

    ``images`` stay at their stored resolution, ``(B, 3, H, W)`` float32 (a
    read-only broadcast view when the source is grayscale). ``size`` is the
    model input size; :meth:`batch` upsamples and pads on the fly so a full
    MNIST-sized set never has to exist at model resolution.
    """

    images: np.ndarray
    labels: np.ndarray  # (B,) int64
    split: str
    num_classes: int
    mean: np.ndarray  # per-channel statistics used for normalisation
    std: np.ndarray
    size: tuple[int, int] | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> Dataset:
        return dataclasses.replace(self, images=self.images[index], labels=self.labels[index])

    def stats(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @property
    def fill(self) -> np.ndarray:
        """Normalised value of a black pixel, used for padding."""
        return (-self.mean / self.std).astype(np.float32)

    def batch(self, index) -> np.ndarray:
        """Images ``index`` at model resolution, as a fresh float32 array."""
        x = np.array(self.images[index], dtype=np.float32)
        return fit_to_size(x, self.size, self.fill)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std; a zero std is replaced by 1."""
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    std[std == 0] = 1.0
    return mean, std


def fit_to_size(images: np.ndarray, size, fill=None) -> np.ndarray:
    """Nearest-neighbour upsample by the largest integer factor that fits, then centre pad/crop.

    ``fill`` gives the per-channel padding value (default 0).
    """
    if size is None:
        return images
    th, tw = (size, size) if isinstance(size, int) else size
    _, _, h, w = images.shape
    if (h, w) == (th, tw):
        return images
    factor = max(1, min(th // h, tw // w))
    if factor > 1:
        images = images.repeat(factor, axis=2).repeat(factor, axis=3)
    h, w = images.shape[2:]
    if h > th:
        top = (h - th) // 2
        images = images[:, :, top:top + th]
    if w > tw:
        left = (w - tw) // 2
        images = images[:, :, :, left:left + tw]
    h, w = images.shape[2:]
    if (h, w) == (th, tw):
        return images
    out = np.empty(images.shape[:2] + (th, tw), dtype=images.dtype)
    out[...] = 0 if fill is None else np.asarray(fill, dtype=images.dtype)[None, :, None, None]
    top, left = (th - h) // 2, (tw - w) // 2
    out[:, :, top:top + h, left:left + w] = images
    return out


def prepare_images(raw: np.ndarray, size=None, stats=None):
    """uint8 ``(B, H, W)`` / ``(B, H, W, C)`` → normalised float32 ``(B, 3, H', W')``.

    Statistics are computed on the stored pixels unless given. Grayscale input
    comes back as a read-only view repeating one channel three times. With
    ``size`` the result is upsampled and padded (with normalised black) to it.
    Returns ``(images, mean, std)``.
    """
    x = np.asarray(raw, dtype=np.float32) / np.float32(255.0)
    if x.ndim == 3:
        x = x[:, None]
    elif x.ndim == 4:
        x = x.transpose(0, 3, 1, 2)
    else:
        raise FormatError(f"unexpected image array shape {raw.shape}")
    if x.shape[1] == 4:
        x = x[:, :3]
    if x.shape[1] not in (1, 3):
        raise FormatError(f"expected 1, 3 or 4 channels, got {x.shape[1]}")
    if stats is None:
        mean, std = channel_stats(x)
        if x.shape[1] == 1:
            mean, std = np.repeat(mean, 3), np.repeat(std, 3)
    else:
        mean, std = (np.asarray(stats["mean"], dtype=np.float64),
                     np.asarray(stats["std"], dtype=np.float64))
    c = x.shape[1]
    x = np.ascontiguousarray(x)
    x -= mean[:c, None, None].astype(np.float32)
    x /= std[:c, None, None].astype(np.float32)
    if c == 1:
        x = np.broadcast_to(x, (x.shape[0], 3) + x.shape[2:])
    if size is not None:
        x = fit_to_size(np.array(x), size, (-mean / std).astype(np.float32))
    return x, mean, std


def _idx_pair(root: Path, split: str):
    prefix = "train" if split == "train" else "t10k"
    for img_name, lab_name in ((f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"),
                               (f"{prefix}-images.idx3-ubyte", f"{prefix}-labels.idx1-ubyte")):
        for ext in ("", ".gz"):
            img, lab = root / (img_name + ext), root / (lab_name + ext)
            if img.exists() and lab.exists():
                return img, lab
    raise FileNotFoundError(f"no {prefix}-images/labels idx pair under {root}")


def load_dataset(path, format="idx_ubyte", split="train", num_classes=10, stats=None,
                 size=None, limit=None) -> Dataset:
    """Load an idx_ubyte pair or a directory of class-named PNG folders.

    For idx data ``path`` is the directory holding the standard MNIST file
    names (``train-*`` for ``split="train"``, ``t10k-*`` otherwise). Pass the
    training split's ``stats`` when loading evaluation data.
    """
    root = Path(path)
    if format == "idx_ubyte":
        img_path, lab_path = _idx_pair(root, split)
        if _idx_magic(img_path) != IDX_IMAGES_MAGIC:
            raise FormatError(f"{img_path}: expected image magic 0x{IDX_IMAGES_MAGIC:08x}")
        if _idx_magic(lab_path) != IDX_LABELS_MAGIC:
            raise FormatError(f"{lab_path}: expected label magic 0x{IDX_LABELS_MAGIC:08x}")
        raw, labels = read_idx(img_path), read_idx(lab_path)
        if len(raw) != len(labels):
            raise FormatError(f"{len(raw)} images but {len(labels)} labels")
    elif format == "image_directory":
        raw, labels = _read_image_directory(root / split if (root / split).is_dir() else root)
    else:
        raise ConfigurationError(f"unknown dataset format {format!r}")
    if limit is not None:
        raw, labels = raw[:limit], labels[:limit]
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise FormatError(f"labels must lie in [0, {num_classes})")
    images, mean, std = prepare_images(raw, None, stats)
    size = None if size is None else ((size, size) if isinstance(size, int) else tuple(size))
    return Dataset(images, labels, split, num_classes, mean, std, size)


def _read_image_directory(root: Path):
    from PIL import Image

    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FormatError(f"{root}: no class subdirectories")
    images, labels = [], []
    for idx, name in enumerate(classes):
        for f in sorted((root / name).glob("*.png")):
            images.append(np.asarray(Image.open(f).convert("RGB")))
            labels.append(idx)
    if not images:
        raise FormatError(f"{root}: no PNG files")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"{root}: images differ in size: {sorted(shapes)}")
    return np.stack(images), np.array(labels)


# -- optimisation -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 128
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None
    hflip: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("base_lr must be positive; decay and warm-up non-negative")
        if self.warmup_epochs >= self.epochs:
            raise ConfigurationError("warmup_epochs must be smaller than epochs")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("momentum parameters must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class WarmupCosine:
    """Linear warm-up to ``base_lr`` then cosine decay to zero at ``total_steps``."""

    base_lr: float
    total_steps: int
    warmup_steps: int = 0

    def __call__(self, position: float) -> float:
        w, t = self.warmup_steps, self.total_steps
        if position < w:
            return self.base_lr * min(1.0, (position + 1) / w)
        if t <= w:
            return 0.0
        progress = min(1.0, (position - w) / (t - w))
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay on matrix-shaped parameters."""

    def __init__(self, named_params: dict[str, Tensor], weight_decay=0.05, beta1=0.9,
                 beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def decays(self, name: str) -> bool:
        return self.params[name].ndim >= 2

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2, t = self.beta1, self.beta2, self.step_count
        c1, c2 = 1 - b1 ** t, 1 - b2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            data = p.data
            if self.weight_decay and self.decays(name):
                data = data * (1 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (data - lr * update).astype(p.dtype, copy=False)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def _diagnose(model: Model, images) -> str:
    for name, p in model.named_parameters().items():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {name} holds non-finite values"
    try:
        with ad.no_grad():
            model.forward(images, check_finite=True)
    except NonFiniteError as exc:
        return str(exc)
    return "loss"


def train_step(model: Model, images, labels, optimizer: AdamW, lr: float,
               grad_clip: float | None = None) -> float:
    """One forward/backward/update; returns the batch loss."""
    logits, _ = model.forward(images)
    loss = ad.softmax_cross_entropy(logits, labels)
    value = float(loss.item())
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss; first non-finite tensor: {_diagnose(model, images)}")
    model.zero_grad()
    ad.backward(loss)
    for name, p in model.named_parameters().items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    if grad_clip is not None:
        clip_grad_norm(model.parameters(), grad_clip)
    optimizer.step(lr)
    return value


@dataclass
class EvalResult:
    top1: float
    loss: float
    count: int


def evaluate(model: Model, dataset: Dataset, batch_size: int = 500) -> EvalResult:
    """Top-1 accuracy (argmax, lowest class on ties) and mean cross-entropy."""
    n = len(dataset)
    if n == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    correct, loss_sum = 0, 0.0
    for start in range(0, n, batch_size):
        x = dataset.batch(slice(start, start + batch_size)).astype(model.dtype, copy=False)
        y = dataset.labels[start:start + batch_size]
        with ad.no_grad():
            logits, _ = model.forward(x)
        correct += int((np.argmax(logits.data, axis=1) == y).sum())
        loss_sum += float(ad.softmax_cross_entropy(logits, y).item()) * len(y)
    return EvalResult(correct / n, loss_sum / n, n)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_top1: float | None
    val_loss: float | None

    def line(self) -> str:
        val = "nan" if self.val_top1 is None else f"{self.val_top1:.6f}"
        return f"epoch={self.epoch} lr={self.lr:.6e} train_loss={self.train_loss:.6f} val_top1={val}"


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def fit(model: Model, train: Dataset, cfg: TrainConfig, val: Dataset | None = None,
        on_epoch: Callable[[EpochMetrics], None] | None = None,
        on_step: Callable[[int, float], None] | None = None) -> list[EpochMetrics]:
    """Train ``model`` in place; returns per-epoch metrics."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    schedule = WarmupCosine(cfg.base_lr, cfg.epochs * steps_per_epoch,
                            int(round(cfg.warmup_epochs * steps_per_epoch)))
    opt = AdamW(model.named_parameters(), cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    history, step = [], 0
    for epoch in range(1, cfg.epochs + 1):
        losses, lr = [], 0.0
        for idx in iterate_batches(len(train), cfg.batch_size, rng):
            x = train.batch(idx)
            if cfg.hflip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[..., ::-1], x)
            lr = schedule(step)
            loss = train_step(model, x.astype(model.dtype, copy=False), train.labels[idx], opt,
                              lr, cfg.grad_clip)
            losses.append(loss)
            if on_step is not None:
                on_step(step, loss)
            step += 1
        metrics = EpochMetrics(epoch, lr, float(np.mean(losses)), None, None)
        if val is not None:
            res = evaluate(model, val)
            metrics.val_top1, metrics.val_loss = res.top1, res.loss
        log.info(metrics.line())
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
    return history
