"""Segments from a briefly trained FEC-Micro, level by level.

We train the 64x64 model for two short epochs to tell vertical from
horizontal colour splits, then push a half red / half blue image through it
with assignment recording switched on. Linking each pooling layer's clusters
to the next gives a pyramid: level 1 has up to 64 segments, level 3 at most
4. The script prints how well each level's segments respect the colour edge
and writes one overlay PNG per level.

Run:  python demos/02_segments_emerge.py [output_dir]
"""

import sys
from pathlib import Path

import numpy as np

from fecnet import autodiff as ad
from fecnet.hierarchy import build_pyramid, overlay, render_segmentation, write_png
from fecnet.model import build_model, fec_micro
from fecnet.synthetic import color_blocks, half_color_image
from fecnet.training import Dataset, TrainConfig, fit, prepare_images


def purity(labels, mask):
    """Share of pixels whose segment's majority colour matches their own."""
    hits = sum(np.bincount(mask[labels == s], minlength=2).max() for s in np.unique(labels))
    return hits / mask.size


def main(out_dir="demo_out"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw, labels = color_blocks(1024, seed=0)
    x, mean, std = prepare_images(raw)
    train = Dataset(np.ascontiguousarray(x), labels, "train", 2, mean, std)
    model = build_model(fec_micro(num_classes=2, seed=0))
    for m in fit(model, train, TrainConfig(epochs=2, batch_size=32, warmup_epochs=0.25)):
        print(m.line())

    image, mask = half_color_image(64)
    xi, _, _ = prepare_images(image[None], stats=train.stats())
    with ad.no_grad():
        _, records = model(np.ascontiguousarray(xi), record_assignments=True)
    pyramid = build_pyramid(records, base_block=model.config.stem_stride)
    pyramid.verify()
    for level in range(1, pyramid.num_levels + 1):
        seg = render_segmentation(pyramid, level)
        n = len(np.unique(seg.labels))
        print(f"level {level}: {n:3d} segments, colour purity {purity(seg.labels, mask):.3f}")
        write_png(out / f"half_level{level}.png", overlay(image, seg.colors))
    print(f"overlays written to {out}/")


if __name__ == "__main__":
    main(*sys.argv[1:])
