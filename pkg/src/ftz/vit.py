"""ViT-style image encoder producing per-block token representations."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import ConfigError, InputError
from .params import ParameterStore
from .rng import Rng
from .tensor import DimensionError, Tensor, broadcast_to, concat, get_default_dtype, permute, reshape

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 8
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    norm_mean: tuple = field(default=CLIP_MEAN)
    norm_std: tuple = field(default=CLIP_STD)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if len(self.norm_mean) != self.channels or len(self.norm_std) != self.channels:
            raise ConfigError("norm_mean/norm_std need one entry per channel")
        object.__setattr__(self, "norm_mean", tuple(float(v) for v in self.norm_mean))
        object.__setattr__(self, "norm_std", tuple(float(v) for v in self.norm_std))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_patches

    @property
    def mlp_dim(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


ANCHOR_DEFAULT = ViTConfig(depth=8, dim=64, heads=4)
AUGMENT_DEFAULT = ViTConfig(depth=4, dim=48, heads=4, norm_mean=IMAGENET_MEAN, norm_std=IMAGENET_STD)


@dataclass
class EncoderActivations:
    per_layer: list  # per_layer[i] is the output of block i+1

    def __len__(self):
        return len(self.per_layer)

    @property
    def last(self) -> Tensor:
        return self.per_layer[-1]


def init_params(store: ParameterStore, prefix: str, cfg: ViTConfig, rng: Rng, frozen: bool = True) -> None:
    """Add a seeded random encoder under ``prefix`` (stand-in for pretrained weights)."""
    layers.add_linear(store, f"{prefix}.patch", cfg.patch_dim, cfg.dim, rng, frozen)
    store.add(f"{prefix}.cls", rng.normal((cfg.dim,), std=0.02), frozen=frozen)
    store.add(f"{prefix}.pos", rng.normal((cfg.num_tokens, cfg.dim), std=0.02), frozen=frozen)
    for b in range(cfg.depth):
        layers.add_block(store, f"{prefix}.blocks.{b}", cfg.dim, cfg.mlp_dim, rng, frozen)


def preprocess(image, cfg: ViTConfig) -> Tensor:
    """[..., S, S, C] uint8 raster -> [..., C, S, S] normalized tensor."""
    img = np.asarray(image)
    S = cfg.image_size
    if img.shape[-3:] != (S, S, cfg.channels):
        raise InputError(f"raster shape {img.shape[-3:]} does not match {(S, S, cfg.channels)}")
    x = (img.astype(np.float64) / 255.0 - np.array(cfg.norm_mean)) / np.array(cfg.norm_std)
    x = np.moveaxis(x, -1, -3)
    return Tensor(x.astype(get_default_dtype()))


def patchify(x: Tensor, cfg: ViTConfig) -> Tensor:
    """[..., C, S, S] -> [..., num_patches, C*P*P]; patches row-major, each flattened (c, y, x)."""
    *lead, C, S, S2 = x.shape
    if (C, S, S2) != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DimensionError(f"patchify: input {x.shape} does not match config")
    P, g = cfg.patch_size, cfg.grid
    n = len(lead)
    x = reshape(x, (*lead, C, g, P, g, P))
    x = permute(x, (*range(n), n + 1, n + 3, n, n + 2, n + 4))
    return reshape(x, (*lead, g * g, C * P * P))


def patch_embed(x: Tensor, params: ParameterStore, prefix: str, cfg: ViTConfig) -> Tensor:
    tokens = layers.linear(patchify(x, cfg), params, f"{prefix}.patch")
    lead = tokens.shape[:-2]
    cls = broadcast_to(reshape(params[f"{prefix}.cls"], (1, cfg.dim)), (*lead, 1, cfg.dim))
    return concat([cls, tokens], axis=-2) + params[f"{prefix}.pos"]


def block_forward(h: Tensor, params: ParameterStore, prefix: str, cfg: ViTConfig, return_weights=False):
    if h.shape[-1] != cfg.dim:
        raise DimensionError(f"block input width {h.shape[-1]} != {cfg.dim}")
    return layers.transformer_block(h, params, prefix, cfg.heads, return_weights=return_weights)


def embed_image(image, cfg: ViTConfig, params: ParameterStore, prefix: str) -> Tensor:
    return patch_embed(preprocess(image, cfg), params, prefix, cfg)


def encode(image, cfg: ViTConfig, params: ParameterStore, prefix: str) -> EncoderActivations:
    """Run preprocess, patch embedding and every block, keeping each block's output."""
    h = embed_image(image, cfg, params, prefix)
    per_layer = []
    for b in range(cfg.depth):
        h = block_forward(h, params, f"{prefix}.blocks.{b}", cfg)
        per_layer.append(h)
    return EncoderActivations(per_layer)
