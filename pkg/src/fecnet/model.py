"""Four-stage clustering backbone with a linear classification head.

Layout: a ``k = stride = stem_stride`` patch convolution, then stage 1 at
``1/stem_stride`` resolution, a clustering pool, stage 2, and so on until
stage 4 at ``1/(8 * stem_stride)``. Each stage stacks encode blocks; a block is
a clustering encode layer optionally followed by a pre-norm GELU MLP
(``ffn_ratios``). The head averages the final features, normalises them and
applies one linear map.
"""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cluster import (ClusterLayerParams, DispatchVariant, SimilarityKind, encode,
                      init_encode_params, init_pool_params, pool)
from .errors import ConfigurationError, DimensionError, NonFiniteError


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    stem_stride: int = 4
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    encode_dims: tuple[int, ...] = (16, 16, 32, 32)
    ffn_ratios: tuple[float, ...] = (2, 2, 2, 2)
    num_classes: int = 10
    similarity: str = "cosine"
    dispatch_variant: str = "eq7"
    normalize: bool = True
    mlp_depth: int = 1
    seed: int = 0

    def __post_init__(self):
        self.input_size = _pair(self.input_size)
        for name in ("stage_depths", "stage_channels", "encode_dims", "ffn_ratios"):
            setattr(self, name, tuple(getattr(self, name)))
        self.similarity = SimilarityKind.parse(self.similarity).value
        self.dispatch_variant = DispatchVariant.parse(self.dispatch_variant).value

    def validate(self) -> None:
        for name in ("stage_depths", "stage_channels", "encode_dims", "ffn_ratios"):
            if len(getattr(self, name)) != 4:
                raise ConfigurationError(f"{name} must list four stages")
        if any(d < 0 for d in self.stage_depths):
            raise ConfigurationError("stage depths must be non-negative")
        if any(c < 1 for c in self.stage_channels + self.encode_dims):
            raise ConfigurationError("channel counts must be positive")
        if self.stem_stride < 1 or self.num_classes < 1 or self.mlp_depth < 1:
            raise ConfigurationError("stem_stride, num_classes and mlp_depth must be positive")
        h, w = self.input_size
        if h % self.stem_stride or w % self.stem_stride:
            raise ConfigurationError(
                f"stem: input {h}x{w} is not divisible by stem stride {self.stem_stride}")
        for stage, (gh, gw) in enumerate(self.stage_grids()[:-1], start=1):
            if gh % 2 or gw % 2:
                raise ConfigurationError(
                    f"stage {stage}: grid {gh}x{gw} cannot be halved for pooling into "
                    f"stage {stage + 1}")
        for stage, ((gh, gw), depth) in enumerate(zip(self.stage_grids(), self.stage_depths), 1):
            if depth and max(1, gh // 2) * max(1, gw // 2) >= gh * gw:
                raise ConfigurationError(
                    f"stage {stage}: grid {gh}x{gw} is too small for an encode layer")

    def stage_grids(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        s = self.stem_stride
        return [(h // (s * 2 ** i), w // (s * 2 ** i)) for i in range(4)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def fec_micro(**overrides) -> ModelConfig:
    """Desk-scale preset: 64x64 input, stem stride 4, one block per stage."""
    return ModelConfig(**overrides)


def fec_small(**overrides) -> ModelConfig:
    """ImageNet-scale preset sized to the 5.5M-parameter class."""
    base = dict(input_size=(224, 224), stem_stride=4, stage_depths=(3, 4, 5, 2),
                stage_channels=(32, 64, 196, 320), encode_dims=(96, 96, 192, 192),
                ffn_ratios=(8, 8, 4, 4), num_classes=1000)
    base.update(overrides)
    return ModelConfig(**base)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    return tuple(int(x) for x in v)


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _ones(n, dtype):
    return Tensor(np.ones(n, dtype=dtype), requires_grad=True)


def _zeros(n, dtype):
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


class EncodeBlock:
    def __init__(self, channels, proj, ffn_ratio, config: ModelConfig, rng, dtype):
        self.params = init_encode_params(channels, proj, rng, normalize=config.normalize,
                                         mlp_depth=config.mlp_depth, dtype=dtype)
        self.ffn = None
        hidden = int(round(channels * ffn_ratio))
        if hidden > 0:
            self.ffn = OrderedDict(
                norm_weight=_ones(channels, dtype), norm_bias=_zeros(channels, dtype),
                fc1_weight=_uniform(rng, channels, (channels, hidden), dtype),
                fc1_bias=_uniform(rng, channels, (hidden,), dtype),
                fc2_weight=_uniform(rng, hidden, (hidden, channels), dtype),
                fc2_bias=_uniform(rng, hidden, (channels,), dtype))

    def named_parameters(self):
        out = OrderedDict((f"cluster.{k}", v) for k, v in self.params.named_parameters().items())
        if self.ffn is not None:
            out.update((f"ffn.{k}", v) for k, v in self.ffn.items())
        return out

    def __call__(self, x, grid, config, layer_id):
        x, record = encode(x, self.params, grid, None, config.similarity,
                           config.dispatch_variant, layer_id)
        if self.ffn is not None:
            f = self.ffn
            h = ad.layer_norm(x, f["norm_weight"], f["norm_bias"])
            h = ad.gelu(ad.linear(h, f["fc1_weight"], f["fc1_bias"]))
            x = ad.add(x, ad.linear(h, f["fc2_weight"], f["fc2_bias"]))
        return x, record


class Model:
    """Stem, four clustering stages and a linear head."""

    def __init__(self, config: ModelConfig, dtype=None):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype or ad.get_default_dtype())
        self.meta: dict = {}
        rng = np.random.default_rng(config.seed)
        s, cin, dt = config.stem_stride, config.in_channels, self.dtype
        c1 = config.stage_channels[0]
        patch = cin * s * s
        self.stem = OrderedDict(weight=_uniform(rng, patch, (patch, c1), dt),
                                bias=_uniform(rng, patch, (c1,), dt))
        if config.normalize:
            self.stem["norm_weight"] = _ones(c1, dt)
            self.stem["norm_bias"] = _zeros(c1, dt)
        self.stages: list[list[EncodeBlock]] = []
        self.pools: list[ClusterLayerParams] = []
        for i in range(4):
            c, proj, ratio = config.stage_channels[i], config.encode_dims[i], config.ffn_ratios[i]
            self.stages.append([EncodeBlock(c, proj, ratio, config, rng, dt)
                                for _ in range(config.stage_depths[i])])
            if i < 3:
                self.pools.append(init_pool_params(c, config.stage_channels[i + 1], rng,
                                                   normalize=config.normalize, dtype=dt))
        c4 = config.stage_channels[3]
        self.head = OrderedDict()
        if config.normalize:
            self.head["norm_weight"] = _ones(c4, dt)
            self.head["norm_bias"] = _zeros(c4, dt)
        self.head["weight"] = _uniform(rng, c4, (c4, config.num_classes), dt)
        self.head["bias"] = _zeros(config.num_classes, dt)

    # -- parameters --------------------------------------------------------
    def named_parameters(self) -> OrderedDict[str, Tensor]:
        out = OrderedDict((f"stem.{k}", v) for k, v in self.stem.items())
        for i, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                out.update((f"stage{i + 1}.block{j}.{k}", v)
                           for k, v in block.named_parameters().items())
            if i < 3:
                out.update((f"pool{i + 1}.{k}", v)
                           for k, v in self.pools[i].named_parameters().items())
        out.update((f"head.{k}", v) for k, v in self.head.items())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise ConfigurationError(f"state mismatch: missing {sorted(missing)}, "
                                     f"unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ConfigurationError(f"{k}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def stage_grids(self):
        return self.config.stage_grids()

    # -- forward -------------------------------------------------------------
    def forward(self, batch, record_assignments=False, check_finite=False):
        """Return ``(logits, records)``; ``records`` is None unless requested.

        Records come in forward order: the encodes of stage 1, pool 1, the
        encodes of stage 2, and so on.
        """
        cfg = self.config
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        h, w = cfg.input_size
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, h, w):
            raise DimensionError(
                f"expected batch of shape (B, {cfg.in_channels}, {h}, {w}), got {x.shape}")
        checks = _FiniteWatch(check_finite)
        feat = self._stem(x)
        checks("stem", feat)
        grid = cfg.stage_grids()[0]
        records, layer_id = [], 0
        for i in range(4):
            for j, block in enumerate(self.stages[i]):
                feat, rec = block(feat, grid, cfg, layer_id)
                checks(f"stage{i + 1}.block{j}", feat)
                records.append(rec)
                layer_id += 1
            if i < 3:
                feat, grid, rec = pool(feat, self.pools[i], grid, cfg.similarity, layer_id)
                checks(f"pool{i + 1}", feat)
                records.append(rec)
                layer_id += 1
        logits = self._head(feat)
        checks("head", logits)
        return logits, (records if record_assignments else None)

    __call__ = forward

    def _stem(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        s = self.config.stem_stride
        patches = ad.reshape(x, (b, c, h // s, s, w // s, s))
        patches = ad.transpose(patches, (0, 2, 4, 1, 3, 5))
        patches = ad.reshape(patches, (b, (h // s) * (w // s), c * s * s))
        feat = ad.linear(patches, self.stem["weight"], self.stem["bias"])
        if "norm_weight" in self.stem:
            feat = ad.layer_norm(feat, self.stem["norm_weight"], self.stem["norm_bias"])
        return feat

    def _head(self, feat: Tensor) -> Tensor:
        pooled = ad.reduce_mean(feat, axis=-2)
        if "norm_weight" in self.head:
            pooled = ad.layer_norm(pooled, self.head["norm_weight"], self.head["norm_bias"])
        return ad.linear(pooled, self.head["weight"], self.head["bias"])

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        return [(gh, gw, c) for (gh, gw), c in zip(self.stage_grids(), self.config.stage_channels)]


class _FiniteWatch:
    def __init__(self, enabled):
        self.enabled = enabled

    def __call__(self, name, t):
        if self.enabled and not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"non-finite values first appear in {name} output")


def build_model(config: ModelConfig, dtype=None) -> Model:
    return Model(config, dtype=dtype)
