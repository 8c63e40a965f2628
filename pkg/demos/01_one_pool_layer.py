"""Walk one clustering pool layer through a tiny two-colour feature map.

An 8x8 map holds two "materials": the left three columns carry one feature
vector, the rest another, each with a little noise. A pool layer seeds 16
centers by averaging 2x2 windows, assigns every pixel to its most similar
center, averages each cluster into a representative, and adds the averaged
input as a residual. Printing the assignment grid shows pixels grouping by
content rather than by position: cells that straddle the material boundary
are split between clusters instead of being blended.

Run:  python demos/01_one_pool_layer.py
"""

import numpy as np

from fecnet import autodiff as ad
from fecnet.autodiff import Tensor
from fecnet.cluster import cluster, init_pool_params, pool


def main():
    rng = np.random.default_rng(0)
    h, w, c = 8, 8, 4
    left, right = np.array([1.0, 0.0, 0.5, 0.0]), np.array([0.0, 1.0, 0.0, 0.5])
    feat = np.where((np.arange(w) < 3)[None, :, None], left, right)
    feat = (feat + rng.normal(0, 0.05, size=(h, w, c))).reshape(h * w, c)

    with ad.precision(np.float64):
        params = init_pool_params(c, c, rng, normalize=False)
        params.key_proj.data[...] = np.eye(c)
        params.value_proj.data[...] = np.eye(c)
        res = cluster(Tensor(feat), params, (h, w), (4, 4))
        out, grid, record = pool(Tensor(feat), params, (h, w))

    print("material map (0 = left, 1 = right):")
    print((np.arange(w)[None, :].repeat(h, 0) >= 3).astype(int))
    print("\ncluster id of every pixel (16 centers on a 4x4 grid):")
    print(res.assignment.reshape(h, w))
    sizes = np.bincount(res.assignment, minlength=16)
    print("\nmembers per cluster:", sizes.tolist())
    print("pooled grid:", grid, "output features:", out.shape)
    # column 3 sits under the second center column, whose window is mostly
    # left material, yet its pixels join clusters seeded on the right
    amap = res.assignment.reshape(h, w)
    print("clusters used by left pixels: ", sorted({int(a) for a in amap[:, :3].ravel()}))
    print("clusters used by right pixels:", sorted({int(a) for a in amap[:, 3:].ravel()}))
    print("record:", record.kind, record.input_grid, "->", record.center_grid)


if __name__ == "__main__":
    main()
