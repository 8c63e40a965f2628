"""Clustering-based feature encoding and pooling.

Feature maps travel as ``(..., N, C)`` tensors with ``N = H * W`` pixels laid
out row-major over an explicit ``(H, W)`` grid. A clustering pass

1. projects pixels into key and value spaces with bias-free linear maps,
2. seeds ``O`` centers by adaptive average pooling of both projections,
3. scores every pixel against every center (cosine by default),
4. assigns each pixel to its best center (hard argmax, lowest index on ties),
5. averages each cluster's values together with its center value.

Encoding sends the gated representative back to the member pixels through a
small MLP and adds it to the input. Pooling returns the representatives plus
a linear projection of the 2x2-averaged input, so the output keeps a grid.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError
from .records import AssignmentRecord

COSINE_EPS = 1e-8


class SimilarityKind(str, enum.Enum):
    COSINE = "cosine"
    DOT_PRODUCT = "dot"
    EUCLIDEAN_NEGATED = "euclidean"

    @classmethod
    def parse(cls, value) -> SimilarityKind:
        if isinstance(value, cls):
            return value
        aliases = {"dot_product": "dot", "euclidean_negated": "euclidean"}
        try:
            return cls(aliases.get(value, value))
        except ValueError:
            raise ConfigurationError(f"unknown similarity {value!r}") from None


class DispatchVariant(str, enum.Enum):
    EQ7 = "eq7"  # only the assigned cluster's gated representative
    S1_DENSE = "s1_dense"  # gated sum over every representative

    @classmethod
    def parse(cls, value) -> DispatchVariant:
        if isinstance(value, cls):
            return value
        try:
            return cls({"s1_dense_dispatch": "s1_dense"}.get(value, value))
        except ValueError:
            raise ConfigurationError(f"unknown dispatch variant {value!r}") from None


# -- parameters ---------------------------------------------------------------

@dataclass
class ClusterLayerParams:
    """Learned weights of one clustering layer.

    Encoding layers use ``alpha``, ``beta`` and ``dispatch_mlp`` (a list of
    ``(weight, bias)`` pairs with GELU between them); pooling layers use
    ``pool_residual``. ``norm_weight``/``norm_bias`` enable the per-pixel
    normalisation applied before every projection.
    """

    key_proj: Tensor
    value_proj: Tensor
    alpha: Tensor | None = None
    beta: Tensor | None = None
    dispatch_mlp: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    pool_residual: Tensor | None = None
    norm_weight: Tensor | None = None
    norm_bias: Tensor | None = None

    def __post_init__(self):
        if self.key_proj.shape != self.value_proj.shape:
            raise ConfigurationError(
                f"key/value projections differ: {self.key_proj.shape} vs {self.value_proj.shape}")
        for name in ("alpha", "beta"):
            t = getattr(self, name)
            if t is not None and t.size != 1:
                raise ConfigurationError(f"{name} must be a single scalar")

    @property
    def in_channels(self) -> int:
        return self.key_proj.shape[0]

    @property
    def proj_channels(self) -> int:
        return self.key_proj.shape[1]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"key_proj": self.key_proj, "value_proj": self.value_proj}
        if self.alpha is not None:
            out["alpha"] = self.alpha
        if self.beta is not None:
            out["beta"] = self.beta
        if len(self.dispatch_mlp) == 1:
            out["mlp_weight"], out["mlp_bias"] = self.dispatch_mlp[0]
        else:
            for i, (w, b) in enumerate(self.dispatch_mlp):
                out[f"mlp{i}_weight"], out[f"mlp{i}_bias"] = w, b
        if self.pool_residual is not None:
            out["pool_residual"] = self.pool_residual
        if self.norm_weight is not None:
            out["norm_weight"] = self.norm_weight
            out["norm_bias"] = self.norm_bias
        return out


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_encode_params(channels, proj_channels, rng, normalize=True, mlp_depth=1,
                       dtype=None) -> ClusterLayerParams:
    dtype = dtype or ad.get_default_dtype()
    key = _uniform(rng, channels, (channels, proj_channels), dtype)
    value = _uniform(rng, channels, (channels, proj_channels), dtype)
    mlp, width = [], proj_channels
    for depth in range(mlp_depth):
        out_w = channels if depth == mlp_depth - 1 else proj_channels
        mlp.append((_uniform(rng, width, (width, out_w), dtype),
                    _uniform(rng, width, (out_w,), dtype)))
        width = out_w
    params = ClusterLayerParams(
        key, value,
        alpha=Tensor(np.array(1.0, dtype=dtype), requires_grad=True),
        beta=Tensor(np.array(0.0, dtype=dtype), requires_grad=True),
        dispatch_mlp=mlp)
    if normalize:
        params.norm_weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        params.norm_bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
    return params


def init_pool_params(channels, out_channels, rng, normalize=True, dtype=None) -> ClusterLayerParams:
    dtype = dtype or ad.get_default_dtype()
    params = ClusterLayerParams(
        _uniform(rng, channels, (channels, out_channels), dtype),
        _uniform(rng, channels, (channels, out_channels), dtype),
        pool_residual=_uniform(rng, channels, (channels, out_channels), dtype))
    if normalize:
        params.norm_weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        params.norm_bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
    return params


# -- grid helpers ---------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _pool_matrix(h, w, oh, ow, dtype_str):
    mat = np.zeros((oh * ow, h * w), dtype=dtype_str)
    for i in range(oh):
        r0, r1 = (i * h) // oh, -((-(i + 1) * h) // oh)
        for j in range(ow):
            c0, c1 = (j * w) // ow, -((-(j + 1) * w) // ow)
            rows = np.arange(r0, r1)[:, None] * w + np.arange(c0, c1)[None, :]
            mat[i * ow + j, rows.ravel()] = 1.0 / rows.size
    mat.setflags(write=False)
    return mat


def adaptive_pool_matrix(grid, center_grid, dtype=None) -> np.ndarray:
    """``(O, N)`` averaging operator of adaptive average pooling.

    Window ``(i, j)`` covers rows ``[floor(i*H/Oh), ceil((i+1)*H/Oh))`` and the
    analogous columns.
    """
    (h, w), (oh, ow) = grid, center_grid
    if not (0 < oh <= h and 0 < ow <= w):
        raise ConfigurationError(f"cannot pool grid {grid} to {center_grid}")
    return _pool_matrix(h, w, oh, ow, np.dtype(dtype or ad.get_default_dtype()).str)


def adaptive_avg_pool(x: Tensor, grid, center_grid) -> Tensor:
    """Adaptive average pooling of ``(..., N, C)`` features to ``(..., O, C)``."""
    if x.shape[-2] != grid[0] * grid[1]:
        raise DimensionError(f"features {x.shape} do not match grid {grid}")
    return ad.matmul(Tensor(adaptive_pool_matrix(grid, center_grid, x.dtype)), x)


def center_grid_for(count: int, grid) -> tuple[int, int]:
    """Lay ``count`` centers out as an ``Oh x Ow`` grid matching ``grid``'s aspect."""
    h, w = grid
    if count < 1 or count > h * w:
        raise ConfigurationError(f"{count} centers do not fit a {h}x{w} grid")
    best = None
    for oh in range(1, h + 1):
        if count % oh:
            continue
        ow = count // oh
        if ow > w:
            continue
        score = abs(math.log(oh / ow) - math.log(h / w))
        if best is None or score < best[0]:
            best = (score, (oh, ow))
    if best is None:
        raise ConfigurationError(f"{count} centers cannot be factored onto a {h}x{w} grid")
    return best[1]


# -- the clustering pass ----------------------------------------------------------

@dataclass
class ClusterResult:
    similarity: Tensor  # (..., N, O)
    assignment: np.ndarray  # (..., N) int
    representatives: Tensor  # (..., O, C')
    center_keys: Tensor
    center_values: Tensor


def _normed(feat: Tensor, params: ClusterLayerParams) -> Tensor:
    if params.norm_weight is None:
        return feat
    return ad.layer_norm(feat, params.norm_weight, params.norm_bias)


def init_centers(feat: Tensor, params: ClusterLayerParams, grid, center_grid):
    """Project ``feat`` and seed centers by adaptive average pooling.

    Returns ``(center_keys, center_values, keys, values)``.
    """
    n = grid[0] * grid[1]
    if feat.shape[-2] != n:
        raise DimensionError(f"features {feat.shape} do not match grid {grid}")
    if center_grid[0] * center_grid[1] > n:
        raise ConfigurationError(f"{center_grid} centers exceed {n} pixels")
    x = _normed(feat, params)
    keys = ad.matmul(x, params.key_proj)
    values = ad.matmul(x, params.value_proj)
    return (adaptive_avg_pool(keys, grid, center_grid),
            adaptive_avg_pool(values, grid, center_grid), keys, values)


def similarity_matrix(keys: Tensor, center_keys: Tensor, kind=SimilarityKind.COSINE) -> Tensor:
    kind = SimilarityKind.parse(kind)
    if keys.shape[-1] != center_keys.shape[-1]:
        raise DimensionError(f"key widths differ: {keys.shape} vs {center_keys.shape}")
    if kind is SimilarityKind.COSINE:
        return ad.cosine_similarity(keys, center_keys, COSINE_EPS)
    if kind is SimilarityKind.DOT_PRODUCT:
        return ad.matmul(keys, ad.swap_last(center_keys))
    return ad.neg_euclidean(keys, center_keys)


def assign(similarity) -> np.ndarray:
    """Row-wise argmax; the result carries no gradient."""
    return ad.max_index(similarity, axis=-1).data


def aggregate_representatives(values: Tensor, center_values: Tensor, assignment) -> Tensor:
    """``R_o = (Cv_o + sum of member values) / (1 + member count)``."""
    assignment = np.asarray(assignment)
    num_centers = center_values.shape[-2]
    onehot = ad.one_hot(assignment, num_centers, dtype=values.dtype)  # (..., N, O)
    counts = onehot.data.sum(axis=-2)[..., None]  # (..., O, 1)
    summed = ad.matmul(ad.swap_last(onehot), values)
    return ad.div(ad.add(center_values, summed), Tensor(1.0 + counts))


def cluster(feat: Tensor, params: ClusterLayerParams, grid, center_grid,
            similarity=SimilarityKind.COSINE) -> ClusterResult:
    ck, cv, keys, values = init_centers(feat, params, grid, center_grid)
    sim = similarity_matrix(keys, ck, similarity)
    labels = assign(sim)
    reps = aggregate_representatives(values, cv, labels)
    return ClusterResult(sim, labels, reps, ck, cv)


def _mlp(x: Tensor, layers) -> Tensor:
    for i, (w, b) in enumerate(layers):
        if i:
            x = ad.gelu(x)
        x = ad.linear(x, w, b)
    return x


def dispatch(feat: Tensor, result: ClusterResult, params: ClusterLayerParams,
             variant=DispatchVariant.EQ7) -> Tensor:
    """``F'_n = F_n + MLP(sigmoid(alpha * M[n, a_n] + beta) * R[a_n])``.

    The dense variant replaces the single gated representative with the sum
    of every representative weighted by its own gate.
    """
    variant = DispatchVariant.parse(variant)
    sim, reps = result.similarity, result.representatives
    if variant is DispatchVariant.EQ7:
        onehot = ad.one_hot(result.assignment, reps.shape[-2], dtype=sim.dtype)
        picked = ad.reduce_sum(ad.mul(sim, onehot), axis=-1, keepdims=True)  # (..., N, 1)
        gate = ad.sigmoid(ad.scale_shift(picked, params.alpha, params.beta))
        mixed = ad.mul(ad.matmul(onehot, reps), gate)
    else:
        gate = ad.sigmoid(ad.scale_shift(sim, params.alpha, params.beta))  # (..., N, O)
        mixed = ad.matmul(gate, reps)
    return ad.add(feat, _mlp(mixed, params.dispatch_mlp))


def encode(feat: Tensor, params: ClusterLayerParams, grid, center_grid=None,
           similarity=SimilarityKind.COSINE, variant=DispatchVariant.EQ7, layer_id=0):
    """Cluster, then dispatch. Returns ``(features, AssignmentRecord)``."""
    n = grid[0] * grid[1]
    if center_grid is None:
        center_grid = default_encode_grid(grid)
    if center_grid[0] * center_grid[1] >= n:
        raise ConfigurationError(
            f"encoding needs fewer centers than pixels: {center_grid} on grid {grid}")
    result = cluster(feat, params, grid, center_grid, similarity)
    out = dispatch(feat, result, params, variant)
    record = AssignmentRecord(layer_id, "encode", tuple(grid), tuple(center_grid),
                              result.assignment.reshape(-1, n),
                              result.representatives.data.reshape(
                                  -1, *result.representatives.shape[-2:]).copy())
    return out, record


def default_encode_grid(grid) -> tuple[int, int]:
    h, w = grid
    return max(1, h // 2), max(1, w // 2)


def pool(feat: Tensor, params: ClusterLayerParams, grid, similarity=SimilarityKind.COSINE,
         layer_id=0):
    """Halve the grid: ``ResConn(avgpool2x2(F)) + R`` on an ``H/2 x W/2`` layout.

    Returns ``(features, out_grid, AssignmentRecord)``.
    """
    h, w = grid
    if h % 2 or w % 2:
        raise ConfigurationError(f"pooling needs an even grid, got {h}x{w}")
    if params.pool_residual is None:
        raise ConfigurationError("pooling layer has no residual projection")
    out_grid = (h // 2, w // 2)
    result = cluster(feat, params, grid, out_grid, similarity)
    cells = adaptive_avg_pool(_normed(feat, params), grid, out_grid)
    out = ad.add(ad.matmul(cells, params.pool_residual), result.representatives)
    record = AssignmentRecord(layer_id, "pool", tuple(grid), out_grid,
                              result.assignment.reshape(-1, h * w),
                              result.representatives.data.reshape(
                                  -1, *result.representatives.shape[-2:]).copy())
    return out, out_grid, record
