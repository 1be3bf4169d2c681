"""Building blocks shared by the vision encoders, fusion modules and language model."""
from __future__ import annotations

import math

import numpy as np

from .params import ParameterStore
from .rng import Rng
from .tensor import (
    DimensionError,
    MASK_VALUE,
    Tensor,
    gelu,
    layer_norm,
    matmul,
    permute,
    reshape,
    softmax_lastdim,
)


def fan_in_uniform(rng: Rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, tuple(shape))


def add_linear(store: ParameterStore, prefix: str, d_in: int, d_out: int, rng: Rng, frozen: bool,
               bias: bool = True, zero: bool = False) -> None:
    w = np.zeros((d_in, d_out)) if zero else fan_in_uniform(rng, d_in, (d_in, d_out))
    store.add(f"{prefix}.weight", w, frozen=frozen)
    if bias:
        store.add(f"{prefix}.bias", np.zeros(d_out), frozen=frozen)


def add_layer_norm(store: ParameterStore, prefix: str, dim: int, frozen: bool) -> None:
    store.add(f"{prefix}.gamma", np.ones(dim), frozen=frozen)
    store.add(f"{prefix}.beta", np.zeros(dim), frozen=frozen)


def linear(x: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    y = matmul(x, params[f"{prefix}.weight"])
    bname = f"{prefix}.bias"
    return y + params[bname] if bname in params else y


def norm(x: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., N, d] -> [..., heads, N, d/heads]"""
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, heads, d // heads))
    return permute(x, (*range(len(lead)), -2, -3, -1))


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, N, hd] -> [..., N, heads*hd]"""
    *lead, h, n, hd = x.shape
    x = permute(x, (*range(len(lead)), -2, -3, -1))
    return reshape(x, (*lead, n, h * hd))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None, return_weights=False):
    """Scaled dot-product attention over ``heads`` heads.

    q: [..., Nq, d]; k, v: [..., Nk, d]. ``mask`` is an additive constant
    broadcastable to [..., heads, Nq, Nk].
    """
    d = q.shape[-1]
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(f"attention widths differ: q {q.shape}, k {k.shape}, v {v.shape}")
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = matmul(qh, permute(kh, (*range(kh.ndim - 2), -1, -2))) * (1.0 / math.sqrt(d // heads))
    if mask is not None:
        scores = scores + mask
    weights = softmax_lastdim(scores)
    out = merge_heads(matmul(weights, vh))
    return (out, weights) if return_weights else out


def causal_mask(n: int, dtype) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE, dtype=dtype), k=1)


def add_block(store: ParameterStore, prefix: str, dim: int, mlp_dim: int, rng: Rng, frozen: bool) -> None:
    add_layer_norm(store, f"{prefix}.ln1", dim, frozen)
    add_linear(store, f"{prefix}.attn.qkv", dim, 3 * dim, rng, frozen)
    add_linear(store, f"{prefix}.attn.out", dim, dim, rng, frozen)
    add_layer_norm(store, f"{prefix}.ln2", dim, frozen)
    add_linear(store, f"{prefix}.mlp.fc1", dim, mlp_dim, rng, frozen)
    add_linear(store, f"{prefix}.mlp.fc2", mlp_dim, dim, rng, frozen)


def transformer_block(h: Tensor, params: ParameterStore, prefix: str, heads: int, mask=None,
                      return_weights=False):
    """Pre-norm block: h + attn(ln1(h)), then + mlp(ln2(h))."""
    d = h.shape[-1]
    qkv = linear(norm(h, params, f"{prefix}.ln1"), params, f"{prefix}.attn.qkv")
    q, k, v = qkv[..., :d], qkv[..., d : 2 * d], qkv[..., 2 * d :]
    att = attention(q, k, v, heads, mask=mask, return_weights=return_weights)
    if return_weights:
        att, weights = att
    h = h + linear(att, params, f"{prefix}.attn.out")
    m = gelu(linear(norm(h, params, f"{prefix}.ln2"), params, f"{prefix}.mlp.fc1"))
    h = h + linear(m, params, f"{prefix}.mlp.fc2")
    return (h, weights) if return_weights else h
