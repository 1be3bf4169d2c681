"""Finite-difference gradient checks over every differentiable op and the composite modules."""
from __future__ import annotations

import numpy as np

from . import fusion, layers, mllm, tensor as T, vit
from .params import ParameterStore
from .rng import Rng, derive_seed
from .tensor import Tensor, gradcheck, precision

TOLERANCE = 1e-4


def _t(rng: Rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(shape) * scale, requires_grad=True)


def _weighted(y: Tensor, rng: Rng) -> callable:
    """Scalar probe sum(y * R) with a fixed random R, so every output element matters."""
    r = rng.normal(y.shape)
    return lambda out: T.tsum(T.mul(out, Tensor(r)))


def _case(build):
    def run(rng):
        f, xs = build(rng)
        probe = _weighted(f(*xs), rng)
        return gradcheck(lambda *a: probe(f(*a)), xs)
    return run


def _ops():
    cases = {}

    def reg(name):
        def deco(build):
            cases[name] = _case(build)
            return build
        return deco

    @reg("add")
    def _(r):
        return (lambda a, b: a + b), [_t(r, 3, 4), _t(r, 4)]

    @reg("sub")
    def _(r):
        return (lambda a, b: a - b), [_t(r, 2, 3, 4), _t(r, 3, 1)]

    @reg("mul")
    def _(r):
        return (lambda a, b: a * b), [_t(r, 3, 4), _t(r, 1, 4)]

    @reg("matmul")
    def _(r):
        return (lambda a, b: a @ b), [_t(r, 3, 5), _t(r, 5, 2)]

    @reg("matmul_batched")
    def _(r):
        return (lambda a, b: a @ b), [_t(r, 2, 3, 4), _t(r, 2, 4, 3)]

    @reg("matmul_shared_weight")
    def _(r):
        return (lambda a, w: a @ w), [_t(r, 2, 3, 4), _t(r, 4, 5)]

    @reg("reshape")
    def _(r):
        return (lambda a: a.reshape(4, 3)), [_t(r, 2, 6)]

    @reg("permute")
    def _(r):
        return (lambda a: a.transpose(2, 0, 1)), [_t(r, 2, 3, 4)]

    @reg("swapaxes")
    def _(r):
        return (lambda a: a.swapaxes(0, 2)), [_t(r, 2, 3, 4)]

    @reg("broadcast_to")
    def _(r):
        return (lambda a: T.broadcast_to(a, (3, 2, 4))), [_t(r, 2, 1)]

    @reg("getitem_slice")
    def _(r):
        return (lambda a: a[1:, ::2]), [_t(r, 3, 5)]

    @reg("getitem_fancy")
    def _(r):
        idx = np.array([2, 0, 2, 1])
        return (lambda a: a[idx]), [_t(r, 3, 4)]

    @reg("concat")
    def _(r):
        return (lambda a, b: T.concat([a, b], axis=1)), [_t(r, 2, 3), _t(r, 2, 2)]

    @reg("stack")
    def _(r):
        return (lambda a, b: T.stack([a, b], axis=-2)), [_t(r, 2, 3), _t(r, 2, 3)]

    @reg("sum")
    def _(r):
        return (lambda a: T.tsum(a, axis=1, keepdims=True)), [_t(r, 3, 4)]

    @reg("mean")
    def _(r):
        return (lambda a: T.mean(a, axis=0)), [_t(r, 3, 4)]

    @reg("embedding")
    def _(r):
        ids = np.array([[1, 3, 1], [0, 4, 4]])
        return (lambda w: T.embedding(w, ids)), [_t(r, 5, 3)]

    @reg("softmax")
    def _(r):
        return T.softmax_lastdim, [_t(r, 3, 5)]

    @reg("gelu")
    def _(r):
        return T.gelu, [_t(r, 4, 5, scale=2.0)]

    @reg("layer_norm")
    def _(r):
        return T.layer_norm, [_t(r, 3, 6), _t(r, 6), _t(r, 6)]

    def ce(r):
        tgt = np.array([[1, 4, -100], [0, 2, 3]])
        logits = _t(r, 2, 3, 5)
        return lambda: gradcheck(lambda z: T.cross_entropy_logits(z, tgt), [logits])

    cases["cross_entropy"] = lambda r: ce(r)()

    @reg("attention")
    def _(r):
        return (lambda q, k, v: layers.attention(q, k, v, 2)), [_t(r, 2, 3, 4), _t(r, 2, 5, 4), _t(r, 2, 5, 4)]

    @reg("attention_causal")
    def _(r):
        mask = layers.causal_mask(4, np.float64)
        return (lambda q, k, v: layers.attention(q, k, v, 2, mask=mask)), [_t(r, 4, 4), _t(r, 4, 4), _t(r, 4, 4)]

    return cases


def _module_case(build):
    """``build(rng) -> (store, forward, names)``; checks gradients w.r.t. the named tensors."""
    def run(rng):
        store, forward, names = build(rng)
        xs = [store[n] for n in names]
        probe = _weighted(forward(), rng)
        return gradcheck(lambda *_: probe(forward()), xs)
    return run


def _randomize(store: ParameterStore, rng: Rng, prefix: str, scale=0.5):
    for n in store.names(prefix):
        store[n].data[...] = rng.normal(store[n].shape) * scale


TINY_ANCHOR = vit.ViTConfig(image_size=16, patch_size=8, depth=2, dim=8, heads=2)
TINY_AUGMENT = vit.ViTConfig(image_size=16, patch_size=8, depth=1, dim=6, heads=2,
                             norm_mean=vit.IMAGENET_MEAN, norm_std=vit.IMAGENET_STD)


def _modules():
    cases = {}

    def fusion_block(r):
        store = ParameterStore()
        point = fusion.FusionPoint(1, 1)
        fusion.init_fusion_module(store, point, 6, 8, r)
        _randomize(store, r, "fusion")  # nonzero W_O so every weight has a gradient
        ha, hg = Tensor(r.normal((2, 5, 8))), Tensor(r.normal((2, 5, 6)))
        return store, (lambda: fusion.fusion_block(ha, hg, store, point, 2)), store.names("fusion")

    def connector(r):
        store = ParameterStore()
        mllm.init_connector(store, mllm.ConnectorConfig(8, 7, 6), r)
        _randomize(store, r, "connector")
        x = Tensor(r.normal((2, 4, 8)))
        return store, (lambda: mllm.connector_forward(x, store)), store.names("connector")

    def vit_block(r):
        # qkv.bias is left to qkv_bias: its key third has an exactly-zero gradient
        store = ParameterStore()
        layers.add_block(store, "anchor.blocks.0", 8, 16, r, frozen=False)
        store.add("input", r.normal((5, 8)))
        fwd = lambda: layers.transformer_block(store["input"], store, "anchor.blocks.0", 2)
        return store, fwd, ["input", *(n for n in store.names("anchor") if not n.endswith("qkv.bias"))]

    def mof(r):
        store = ParameterStore()
        store.add("fusion.mof.w_proj", r.normal((6, 8)))
        ha, hg = Tensor(r.normal((5, 8))), Tensor(r.normal((5, 6)))
        return store, (lambda: fusion.interleave_mof(ha, hg, store["fusion.mof.w_proj"])), ["fusion.mof.w_proj"]

    def ftz_encoder(r):
        cfg = fusion.ComposedEncoderConfig(TINY_ANCHOR, TINY_AUGMENT, "ftz", 2, 2)
        store = ParameterStore()
        vit.init_params(store, "anchor", cfg.anchor, r)
        vit.init_params(store, "augment", cfg.augment, r)
        fusion.init_params(store, cfg, r)
        _randomize(store, r, "fusion")
        img = (r.random((16, 16, 3)) * 255).astype(np.uint8)
        return store, (lambda: fusion.composed_encode(img, cfg, store)), store.names("fusion")

    for name, build in (("fusion_block", fusion_block), ("connector", connector), ("vit_block", vit_block),
                        ("interleave_mof", mof), ("ftz_encoder", ftz_encoder)):
        cases[name] = _module_case(build)
    return cases


def qkv_bias(rng: Rng) -> float:
    """Query/value bias thirds against finite differences; the key third must be exactly zero.

    Shifting every key by one vector moves each query's logits by a constant,
    which softmax ignores, so a relative error there would only measure
    rounding noise.
    """
    store = ParameterStore()
    layers.add_block(store, "anchor.blocks.0", 8, 16, rng, frozen=False)
    h = Tensor(rng.normal((5, 8)))
    bias = store["anchor.blocks.0.attn.qkv.bias"]
    fwd = lambda: layers.transformer_block(h, store, "anchor.blocks.0", 2)
    probe = _weighted(fwd(), rng)
    full = bias.data.copy()
    d = full.size // 3
    worst = 0.0
    for part in (slice(0, d), slice(2 * d, 3 * d)):
        sub = Tensor(full[part].copy(), requires_grad=True)

        def f(x, part=part):
            pieces = [Tensor(full[:d]), Tensor(full[d : 2 * d]), Tensor(full[2 * d :])]
            pieces[0 if part.start == 0 else 2] = x
            store._tensors["anchor.blocks.0.attn.qkv.bias"] = T.concat(pieces, axis=0)
            try:
                return probe(fwd())
            finally:
                store._tensors["anchor.blocks.0.attn.qkv.bias"] = bias
        worst = max(worst, gradcheck(f, [sub]))
    T.reset_tape()
    was = bias.requires_grad
    bias.requires_grad = True
    bias.grad = None
    T.backward(probe(fwd()))
    key_grad = bias.grad[d : 2 * d]
    bias.requires_grad, bias.grad = was, None
    if np.any(np.abs(key_grad) > 1e-12):
        return float("inf")
    return worst


CASES = {**_ops(), **_modules(), "qkv_bias": qkv_bias}


def run_suite(instances: int = 10, seed: int = 0, names=None) -> dict:
    """Max relative error per case over ``instances`` random draws, in 64-bit mode."""
    out = {}
    with precision(np.float64):
        for name in names or CASES:
            worst = 0.0
            for i in range(instances):
                worst = max(worst, CASES[name](Rng(derive_seed(seed, "gradcheck", name, i))))
            out[name] = worst
    return out
