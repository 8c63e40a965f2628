"""Central finite-difference checks of analytic gradients (64-bit)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cluster import (DispatchVariant, SimilarityKind, cluster, encode, init_encode_params,
                      init_pool_params, pool)

DEFAULT_STEP = 1e-4
TOLERANCE = 1e-4


def relative_error(analytic, numeric, floor=1e-8) -> np.ndarray:
    """Element-wise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, h=DEFAULT_STEP) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to ``tensor.data`` (in place)."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().item())
        flat[i] = orig - h
        down = float(loss_fn().item())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor],
                    h=DEFAULT_STEP) -> dict[str, float]:
    """Max element-wise relative error per named tensor."""
    for t in tensors.values():
        t.zero_grad()
    ad.backward(loss_fn())
    report = {}
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numerical_gradient(loss_fn, t, h)
        report[name] = float(relative_error(analytic, numeric).max())
    return report


def _min_margin(sim: np.ndarray) -> float:
    top2 = np.sort(sim, axis=-1)[..., -2:]
    return float((top2[..., 1] - top2[..., 0]).min())


def layer_suite(seed=0, h=DEFAULT_STEP, similarity=SimilarityKind.COSINE,
                variant=DispatchVariant.EQ7) -> dict[str, dict[str, float]]:
    """Gradient errors for one bare encode layer and one bare pool layer.

    Inputs are redrawn until every pixel's best center beats the runner-up by
    a margin far above the step size, so no assignment flips while probing.
    """
    rng = np.random.default_rng(seed)
    results = {}
    with ad.precision(np.float64):
        for kind, grid, channels, proj in (("encode", (4, 4), 8, 6), ("pool", (4, 4), 8, 6)):
            while True:
                feat = Tensor(rng.normal(size=(grid[0] * grid[1], channels)), requires_grad=True)
                if kind == "encode":
                    params = init_encode_params(channels, proj, rng, normalize=False)
                    params.alpha.data[...] = rng.uniform(0.5, 1.5)
                    params.beta.data[...] = rng.uniform(-0.5, 0.5)

                    def run(feat=feat, params=params):
                        return encode(feat, params, grid, (2, 2), similarity, variant)[0]
                else:
                    params = init_pool_params(channels, proj, rng, normalize=False)

                    def run(feat=feat, params=params):
                        return pool(feat, params, grid, similarity)[0]
                sim = cluster(feat, params, grid, (2, 2), similarity).similarity.data
                if _min_margin(sim) > 1e-2:
                    break
            probe = rng.normal(size=run().shape)

            def loss(run=run, probe=probe):
                return ad.reduce_sum(ad.mul(run(), Tensor(probe)))

            results[kind] = check_gradients(loss, params.named_parameters(), h)
    return results
