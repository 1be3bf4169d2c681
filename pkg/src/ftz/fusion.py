"""Cross-attention fusion of an augmenting encoder into an anchor encoder.

At each fusion point (anchor block i, augment block j) the augment tokens are
projected to the anchor width, used as keys/values for multi-head
cross-attention with the anchor tokens as queries, and the attention output
is added back to the anchor stream before anchor block i+1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers, vit
from .errors import ConfigError
from .params import ParameterStore
from .rng import Rng
from .tensor import DimensionError, Tensor, matmul, reshape, stack

MODES = ("ftz", "anchor_only", "interleaved_mof")


@dataclass(frozen=True, order=True)
class FusionPoint:
    anchor_layer: int  # 1-based
    augment_layer: int  # 1-based


@dataclass(frozen=True)
class ComposedEncoderConfig:
    anchor: vit.ViTConfig = vit.ANCHOR_DEFAULT
    augment: vit.ViTConfig = vit.AUGMENT_DEFAULT
    mode: str = "ftz"
    num_fusion_points: int = 4
    fusion_heads: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown tower mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "ftz":
            if not 1 <= self.num_fusion_points <= self.anchor.depth:
                raise ConfigError(
                    f"num_fusion_points {self.num_fusion_points} outside [1, {self.anchor.depth}]")
            if self.anchor.dim % self.fusion_heads:
                raise ConfigError(f"anchor dim {self.anchor.dim} not divisible by {self.fusion_heads} fusion heads")

    @property
    def points(self) -> list:
        if self.mode != "ftz":
            return []
        return map_layers(self.anchor.depth, self.augment.depth, self.num_fusion_points)

    @property
    def out_tokens(self) -> int:
        n = self.anchor.num_tokens
        return 2 * n if self.mode == "interleaved_mof" else n


def map_layers(anchor_depth: int, augment_depth: int, k: int) -> list:
    """Uniformly spaced anchor layers, each paired with the augment layer at the closest relative depth.

    Anchor layer i_k = round_half_up(k * L_a / K); augment layer minimizes
    |i/L_a - j/L_g| with ties going to the smaller j. Exact integer arithmetic.
    """
    La, Lg = int(anchor_depth), int(augment_depth)
    if La < 1 or Lg < 1:
        raise ConfigError(f"depths must be >= 1, got {La}, {Lg}")
    if not 1 <= k <= La:
        raise ConfigError(f"K={k} outside [1, {La}]")
    points = []
    seen = set()
    for step in range(1, k + 1):
        i = (2 * step * La + k) // (2 * k)
        if i in seen:
            continue
        seen.add(i)
        # |i/La - j/Lg| compared as |i*Lg - j*La|; min() keeps the first (smallest) j on ties
        j = min(range(1, Lg + 1), key=lambda jj: abs(i * Lg - jj * La))
        points.append(FusionPoint(i, j))
    return sorted(points)


def module_prefix(point: FusionPoint) -> str:
    return f"fusion.{point.anchor_layer}"


def init_fusion_module(store: ParameterStore, point: FusionPoint, d_aug: int, d_anchor: int, rng: Rng) -> None:
    """W_proj, W_Q, W_K, W_V get fan-in uniform init; W_O starts at zero so the module is an identity."""
    p = module_prefix(point)
    store.add(f"{p}.w_proj", layers.fan_in_uniform(rng, d_aug, (d_aug, d_anchor)))
    for name in ("w_q", "w_k", "w_v"):
        store.add(f"{p}.{name}", layers.fan_in_uniform(rng, d_anchor, (d_anchor, d_anchor)))
    store.add(f"{p}.w_o", np.zeros((d_anchor, d_anchor)))


def init_params(store: ParameterStore, cfg: ComposedEncoderConfig, rng: Rng) -> None:
    """Trainable tower parameters for ``cfg.mode`` (none for anchor_only)."""
    if cfg.mode == "ftz":
        for point in cfg.points:
            init_fusion_module(store, point, cfg.augment.dim, cfg.anchor.dim, rng)
    elif cfg.mode == "interleaved_mof":
        d_aug, d = cfg.augment.dim, cfg.anchor.dim
        store.add("fusion.mof.w_proj", layers.fan_in_uniform(rng, d_aug, (d_aug, d)))


def project_augment(h_aug: Tensor, w_proj: Tensor) -> Tensor:
    if h_aug.shape[-1] != w_proj.shape[0]:
        raise DimensionError(f"project_augment: tokens {h_aug.shape} vs W_proj {w_proj.shape}")
    return matmul(h_aug, w_proj)


def mhca(h_anchor: Tensor, h_proj: Tensor, params: ParameterStore, prefix: str, heads: int,
         return_weights=False):
    """Queries from the anchor tokens, keys/values from projected augment tokens; output through W_O."""
    d = h_anchor.shape[-1]
    if d % heads:
        raise ConfigError(f"anchor width {d} not divisible by {heads} heads")
    if h_proj.shape[-1] != d:
        raise DimensionError(f"mhca: anchor width {d} vs projected width {h_proj.shape[-1]}")
    q = matmul(h_anchor, params[f"{prefix}.w_q"])
    k = matmul(h_proj, params[f"{prefix}.w_k"])
    v = matmul(h_proj, params[f"{prefix}.w_v"])
    out = layers.attention(q, k, v, heads, return_weights=return_weights)
    if return_weights:
        out, weights = out
        return matmul(out, params[f"{prefix}.w_o"]), weights
    return matmul(out, params[f"{prefix}.w_o"])


def fuse_residual(h_anchor: Tensor, h_cross: Tensor) -> Tensor:
    if h_anchor.shape != h_cross.shape:
        raise DimensionError(f"fuse_residual: {h_anchor.shape} vs {h_cross.shape}")
    return h_anchor + h_cross


def fusion_block(h_anchor: Tensor, h_aug: Tensor, params: ParameterStore, point: FusionPoint, heads: int) -> Tensor:
    p = module_prefix(point)
    h_proj = project_augment(h_aug, params[f"{p}.w_proj"])
    return fuse_residual(h_anchor, mhca(h_anchor, h_proj, params, p, heads))


def interleave_mof(h_anchor: Tensor, h_aug: Tensor, w_proj: Tensor) -> Tensor:
    """Rows alternate anchor token t, projected augment token t."""
    if h_anchor.shape[-2] != h_aug.shape[-2]:
        raise ConfigError(
            f"MoF baseline requires matching grids: {h_anchor.shape[-2]} vs {h_aug.shape[-2]} tokens")
    g = project_augment(h_aug, w_proj)
    *lead, n, d = h_anchor.shape
    return reshape(stack([h_anchor, g], axis=-2), (*lead, 2 * n, d))


# ---------------------------------------------------------------------------
# composed encoder


@dataclass
class FrozenPrefix:
    """Activations that depend only on frozen weights and the image.

    ``anchor_h`` is the anchor stream after block ``start`` (before any fusion
    there); ``augment`` maps 1-based augment layers to their outputs.
    """

    start: int
    anchor_h: Tensor
    augment: dict

    def take(self, idx) -> "FrozenPrefix":
        return FrozenPrefix(self.start, Tensor(self.anchor_h.data[idx]),
                            {j: Tensor(t.data[idx]) for j, t in self.augment.items()})


def _prefix_start(cfg: ComposedEncoderConfig) -> int:
    if cfg.mode == "ftz":
        return cfg.points[0].anchor_layer
    return cfg.anchor.depth


def frozen_prefix(image, cfg: ComposedEncoderConfig, params: ParameterStore, start: int | None = None) -> FrozenPrefix:
    """Run the frozen part of the tower: anchor blocks up to the first fusion point, needed augment layers.

    ``start`` may be lowered (down to 0, the embedding output) to trace earlier anchor layers.
    """
    start = _prefix_start(cfg) if start is None else min(start, _prefix_start(cfg))
    h = vit.embed_image(image, cfg.anchor, params, "anchor")
    for b in range(start):
        h = vit.block_forward(h, params, f"anchor.blocks.{b}", cfg.anchor)
    augment = {}
    if cfg.mode != "anchor_only":
        needed = {p.augment_layer for p in cfg.points} if cfg.mode == "ftz" else {cfg.augment.depth}
        acts = vit.encode(image, cfg.augment, params, "augment")
        augment = {j: acts.per_layer[j - 1] for j in sorted(needed)}
    return FrozenPrefix(start, h, augment)


def composed_layers(image, cfg: ComposedEncoderConfig, params: ParameterStore, prefix: FrozenPrefix | None = None):
    """Anchor-stream outputs after each block from ``prefix.start`` on, and the final tower output.

    Returns (per_layer, output); per_layer[b] is the post-fusion stream after block b+1
    for blocks >= prefix.start.
    """
    if prefix is None:
        prefix = frozen_prefix(image, cfg, params)
    per_layer = {}
    h = prefix.anchor_h
    fuse_at = {p.anchor_layer: p for p in cfg.points}
    for layer in range(prefix.start, cfg.anchor.depth + 1):
        if layer > prefix.start:
            h = vit.block_forward(h, params, f"anchor.blocks.{layer - 1}", cfg.anchor)
        point = fuse_at.get(layer)
        if point is not None:
            if f"{module_prefix(point)}.w_o" not in params:
                raise ConfigError(f"missing fusion module for point ({point.anchor_layer}, {point.augment_layer})")
            h = fusion_block(h, prefix.augment[point.augment_layer], params, point, cfg.fusion_heads)
        per_layer[layer] = h
    if cfg.mode == "interleaved_mof":
        out = interleave_mof(h, prefix.augment[cfg.augment.depth], params["fusion.mof.w_proj"])
    else:
        out = h
    return per_layer, out


def composed_encode(image, cfg: ComposedEncoderConfig, params: ParameterStore, prefix: FrozenPrefix | None = None) -> Tensor:
    return composed_layers(image, cfg, params, prefix)[1]
