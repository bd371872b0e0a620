"""Semi-Siamese encoding: modality embeddings, a weight-shared image encoder and a risk encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, uniform_param
from .tensor import Tensor
from .vss import VSSBlock

NODATA = 255

MODALITY_CHANNELS = {"sar": 4, "vhr": 3, "risk": 1}


@dataclass
class ModelConfig:
    embed_dim: int = 16
    dims: tuple[int, ...] = (16, 32, 64, 128)
    depths: tuple[int, ...] = (1, 1, 2, 1)
    d_state: int = 8
    expand: int = 2
    patch: int = 4
    decoder_dim: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.depths = tuple(self.depths)
        if len(self.dims) != len(self.depths):
            raise ValueError("dims and depths must have one entry per stage")
        for a, b in zip(self.dims, self.dims[1:]):
            if b != 2 * a:
                raise ValueError("each stage must double the channel count")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def reduction(self) -> int:
        """Total spatial reduction from the input raster to the deepest stage."""
        return self.patch * 2 ** (len(self.dims) - 1)


@dataclass
class ModalityBundle:
    """Co-registered channels-first rasters of one chip."""

    pre_sar: np.ndarray                 # (4, H, W)
    post_sar: np.ndarray                # (4, H, W)
    risk: np.ndarray                    # (1, H, W)
    vhr: np.ndarray | None = None       # (3, H, W)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {r.shape[1:] for r in (self.pre_sar, self.post_sar, self.risk, self.vhr) if r is not None}
        if len(shapes) != 1:
            raise ValueError(f"rasters are not co-registered: {shapes}")
        for name, kind in (("pre_sar", "sar"), ("post_sar", "sar"), ("risk", "risk"), ("vhr", "vhr")):
            r = getattr(self, name)
            if r is not None and r.shape[0] != MODALITY_CHANNELS[kind]:
                raise ValueError(f"{name}: expected {MODALITY_CHANNELS[kind]} channels, got {r.shape[0]}")

    @property
    def hw(self) -> tuple[int, int]:
        return self.pre_sar.shape[1:]

    def has_vhr(self) -> bool:
        return self.vhr is not None and bool((self.vhr != NODATA).any())


def validity_mask(raster: np.ndarray) -> np.ndarray:
    """Pixels where no channel carries the no-data value."""
    return (raster != NODATA).all(axis=0)


class ModalityEmbedding(Module):
    """1x1 convolutional projection of one sensor type to the shared embedding width."""

    def __init__(self, rng, kind: str, embed_dim: int, dtype=np.float32):
        self.kind = kind
        cin = MODALITY_CHANNELS[kind]
        self.weight = uniform_param(rng, (embed_dim, cin, 1, 1), cin, dtype)
        self.bias = uniform_param(rng, (embed_dim,), cin, dtype)

    def __call__(self, raster: np.ndarray) -> tuple[Tensor, np.ndarray]:
        raster = np.asarray(raster)
        if raster.ndim != 3 or raster.shape[0] != MODALITY_CHANNELS[self.kind]:
            raise ValueError(f"{self.kind} embedding expects {MODALITY_CHANNELS[self.kind]} channels, "
                             f"got shape {raster.shape}")
        mask = validity_mask(raster)
        x = np.where(mask[None], raster, 0.0).astype(self.weight.dtype)
        y = T.conv2d_embed(Tensor(x), self.weight, self.bias, stride=1)   # (C0, H, W)
        y = T.transpose(y, (1, 2, 0)) * Tensor(mask[..., None].astype(x.dtype))
        return y, mask


class HierarchicalEncoder(Module):
    """Patch partition + VSS blocks, then three (2x2 merge + VSS blocks) stages.

    Accepts channels-last grids with arbitrary leading axes; every leading
    index is encoded independently with the same parameters.
    """

    def __init__(self, rng, cfg: ModelConfig):
        dt = cfg.np_dtype
        c0, p = cfg.embed_dim, cfg.patch
        self.cfg = cfg
        self.patch_weight = uniform_param(rng, (cfg.dims[0], c0, p, p), c0 * p * p, dt)
        self.patch_bias = uniform_param(rng, (cfg.dims[0],), c0 * p * p, dt)
        self.patch_norm = LayerNorm(cfg.dims[0], dt)
        self.merges = [Linear(rng, 4 * cfg.dims[i - 1], cfg.dims[i], dtype=dt) for i in range(1, len(cfg.dims))]
        self.stages = [[VSSBlock(rng, d, cfg.expand, cfg.d_state, dt) for _ in range(n)]
                       for d, n in zip(cfg.dims, cfg.depths)]

    def __call__(self, g: Tensor) -> list[Tensor]:
        H, W = g.shape[-3:-1]
        r = self.cfg.reduction
        if H % r or W % r:
            raise ValueError(f"grid {H}x{W} must be divisible by {r}")
        nl = g.ndim - 3
        lead = tuple(range(nl))
        x = T.transpose(g, lead + (nl + 2, nl, nl + 1))
        x = T.conv2d_embed(x, self.patch_weight, self.patch_bias, stride=self.cfg.patch)
        x = self.patch_norm(T.transpose(x, lead + (nl + 1, nl + 2, nl)))
        feats = []
        for i, blocks in enumerate(self.stages):
            if i > 0:
                merge = self.merges[i - 1]
                x = T.downsample2x_merge(x, merge.weight, merge.bias)
            for blk in blocks:
                x = blk(x)
            feats.append(x)
        return feats

