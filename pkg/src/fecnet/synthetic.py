"""Procedural datasets for offline runs.

``make_digits`` renders handwriting-like 28x28 digits from the system's
TrueType fonts with random pose, scale, stroke width, blur and noise, and
``write_mnist_idx`` stores them under the standard MNIST file names so the
regular idx loader reads them. Real MNIST files drop in unchanged.
"""

from __future__ import annotations

import glob
import os
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from .training import write_idx

_FONT_GLOBS = ("/usr/share/fonts/truetype/dejavu/*.ttf", "/usr/share/fonts/truetype/*/*.ttf",
               "/usr/share/fonts/**/*.ttf")


def available_fonts() -> list[str]:
    for pattern in _FONT_GLOBS:
        found = sorted(f for f in glob.glob(pattern, recursive=True)
                       if "ExtraLight" not in f and "Condensed" not in f)
        if found:
            return found
    return []


def _load_fonts(size):
    paths = available_fonts()
    if paths:
        return [ImageFont.truetype(p, size) for p in paths]
    return [ImageFont.load_default(size)]


def render_digit(digit: int, rng: np.random.Generator, fonts, size: int = 28) -> np.ndarray:
    canvas = 64
    img = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(img)
    font = fonts[rng.integers(len(fonts))]
    text = str(digit)
    box = draw.textbbox((0, 0), text, font=font)
    w, h = box[2] - box[0], box[3] - box[1]
    draw.text(((canvas - w) / 2 - box[0], (canvas - h) / 2 - box[1]), text, fill=255, font=font)
    grow = int(rng.integers(0, 3))
    if grow:
        img = img.filter(ImageFilter.MaxFilter(2 * grow + 1))
    angle = rng.uniform(-18, 18)
    scale = rng.uniform(0.75, 1.15)
    shear = rng.uniform(-0.3, 0.3)
    # inverse affine about the canvas centre: rotation, anisotropic scale, shear
    c, s = np.cos(np.radians(angle)), np.sin(np.radians(angle))
    sx = scale * rng.uniform(0.85, 1.15)
    sy = scale
    fwd = np.array([[c, -s], [s, c]]) @ np.array([[1, shear], [0, 1]]) @ np.diag([sx, sy])
    inv = np.linalg.inv(fwd)
    centre = np.array([canvas / 2, canvas / 2])
    shift = rng.uniform(-4, 4, size=2)
    offset = centre - inv @ (centre + shift)
    img = img.transform((canvas, canvas), Image.AFFINE,
                        (inv[0, 0], inv[0, 1], offset[0], inv[1, 0], inv[1, 1], offset[1]),
                        resample=Image.BILINEAR)
    img = img.filter(ImageFilter.GaussianBlur(rng.uniform(0.3, 1.2)))
    img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32)
    arr = arr * rng.uniform(0.7, 1.0) + rng.normal(0, rng.uniform(0, 18), arr.shape)
    return np.clip(arr, 0, 255).astype(np.uint8)


def make_digits(n: int, seed: int = 0, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """``n`` balanced-ish random digits as uint8 ``(n, size, size)`` plus labels."""
    rng = np.random.default_rng(seed)
    fonts = _load_fonts(40)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = np.stack([render_digit(int(d), rng, fonts, size) for d in labels])
    return images, labels


def write_mnist_idx(root, n_train=60000, n_test=10000, seed=0) -> Path:
    """Write synthetic digits under the standard MNIST idx file names."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for prefix, n, s in (("train", n_train, seed), ("t10k", n_test, seed + 1)):
        images, labels = make_digits(n, s)
        write_idx(root / f"{prefix}-images-idx3-ubyte", images)
        write_idx(root / f"{prefix}-labels-idx1-ubyte", labels)
    return root


def mnist_dir(cache_root=None, n_train=60000, n_test=10000, seed=0) -> Path:
    """Directory with MNIST-format data.

    ``$FEC_MNIST_DIR`` wins when set (point it at real MNIST); otherwise a
    synthetic set is generated once under ``cache_root``.
    """
    env = os.environ.get("FEC_MNIST_DIR")
    if env:
        return Path(env)
    root = Path(cache_root or Path.home() / ".cache" / "fecnet") / f"synthetic-mnist-{n_train}-{n_test}-{seed}"
    if not (root / "t10k-labels-idx1-ubyte").exists():
        write_mnist_idx(root, n_train, n_test, seed)
    return root


def half_color_image(size=64, left=(220, 40, 40), right=(40, 60, 220)):
    """Image split vertically into two flat colours, plus its 0/1 column mask."""
    h, w = (size, size) if isinstance(size, int) else size
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:, : w // 2] = left
    img[:, w // 2:] = right
    mask = np.zeros((h, w), dtype=np.int64)
    mask[:, w // 2:] = 1
    return img, mask


def color_blocks(n: int, size: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Images made of two flat random colours split at a random vertical or
    horizontal line; the label says which orientation (0 vertical, 1 horizontal)."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    labels = rng.integers(0, 2, size=n)
    for i in range(n):
        a, b = rng.integers(0, 256, size=(2, 3))
        cut = int(rng.integers(size // 4, 3 * size // 4))
        images[i] = a
        if labels[i] == 0:
            images[i, :, cut:] = b
        else:
            images[i, cut:, :] = b
    return images, labels.astype(np.int64)
