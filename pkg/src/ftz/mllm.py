"""Connector MLP, visual-token prepending and a tiny causal language model."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import fusion, layers, vit
from .errors import ConfigError, LengthError
from .params import ParameterStore
from .rng import Rng, derive_seed
from .tensor import (
    IGNORE_INDEX,
    Tensor,
    concat,
    cross_entropy_logits,
    embedding,
    gelu,
    no_grad,
)

# ---------------------------------------------------------------------------
# tokenizer

SPECIALS = ("<pad>", "<bos>", "<eos>")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SHAPES = ("circle", "square", "triangle")
WORDS = ("how", "many", "is", "there", "a", "are", "?", "yes", "no", "describe")
NUMBERS = tuple(str(n) for n in range(7))


class Tokenizer:
    """Whitespace tokenizer over the closed question/answer grammar."""

    def __init__(self, tokens=None):
        tokens = list(tokens or (*SPECIALS, *WORDS, *NUMBERS, *COLORS, *SHAPES))
        if len(set(tokens)) != len(tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        self.pad, self.bos, self.eos = (self.ids[s] for s in SPECIALS)

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list:
        try:
            return [self.ids[w] for w in text.split()]
        except KeyError as exc:
            raise ConfigError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def manifest(self) -> str:
        """One ``token<TAB>id`` line per entry, sorted by id."""
        return "".join(f"{t}\t{i}\n" for i, t in enumerate(self.tokens))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.manifest().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.manifest())

    @classmethod
    def load(cls, path) -> "Tokenizer":
        with open(path, encoding="utf-8") as fh:
            rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
        rows.sort(key=lambda r: int(r[1]))
        if [int(r[1]) for r in rows] != list(range(len(rows))):
            raise ConfigError(f"{path}: vocabulary ids are not contiguous from 0")
        return cls([r[0] for r in rows])


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 64
    dim: int = 64
    depth: int = 4
    heads: int = 4
    max_seq_len: int = 64
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"LM dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ConnectorConfig:
    in_dim: int
    hidden_dim: int
    out_dim: int


@dataclass(frozen=True)
class ModelConfig:
    tower: fusion.ComposedEncoderConfig = field(default_factory=fusion.ComposedEncoderConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    connector_hidden: int = 64
    include_cls: bool = False

    @property
    def connector(self) -> ConnectorConfig:
        return ConnectorConfig(self.tower.anchor.dim, self.connector_hidden, self.lm.dim)

    @property
    def num_visual(self) -> int:
        n = self.tower.out_tokens
        if not self.include_cls:
            n -= 2 if self.tower.mode == "interleaved_mof" else 1
        return n


# ---------------------------------------------------------------------------
# connector and LM


def init_connector(store: ParameterStore, cfg: ConnectorConfig, rng: Rng) -> None:
    layers.add_linear(store, "connector.fc1", cfg.in_dim, cfg.hidden_dim, rng, frozen=False)
    layers.add_linear(store, "connector.fc2", cfg.hidden_dim, cfg.out_dim, rng, frozen=False)


def connector_forward(tokens: Tensor, params: ParameterStore) -> Tensor:
    """linear -> GELU -> linear, per token."""
    return layers.linear(gelu(layers.linear(tokens, params, "connector.fc1")), params, "connector.fc2")


def init_lm(store: ParameterStore, cfg: LMConfig, rng: Rng, zero_head: bool = True, emb_std: float = 1.0) -> None:
    # unit-variance embeddings keep the input space on the scale a freshly initialized connector emits
    store.add("lm.tok_emb", rng.normal((cfg.vocab_size, cfg.dim), std=emb_std))
    store.add("lm.pos_emb", rng.normal((cfg.max_seq_len, cfg.dim), std=emb_std))
    mlp = int(round(cfg.dim * cfg.mlp_ratio))
    for b in range(cfg.depth):
        layers.add_block(store, f"lm.blocks.{b}", cfg.dim, mlp, rng, frozen=False)
    layers.add_layer_norm(store, "lm.ln_f", cfg.dim, frozen=False)
    layers.add_linear(store, "lm.head", cfg.dim, cfg.vocab_size, rng, frozen=False, zero=zero_head)


def lm_forward(embeds: Tensor, params: ParameterStore, cfg: LMConfig) -> Tensor:
    """[B, L, d] input embeddings -> [B, L, vocab] logits under a causal mask."""
    L = embeds.shape[-2]
    if L > cfg.max_seq_len:
        raise LengthError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    h = embeds + params["lm.pos_emb"][:L]
    mask = layers.causal_mask(L, h.data.dtype)
    for b in range(cfg.depth):
        h = layers.transformer_block(h, params, f"lm.blocks.{b}", cfg.heads, mask=mask)
    return layers.linear(layers.norm(h, params, "lm.ln_f"), params, "lm.head")


# ---------------------------------------------------------------------------
# batches


@dataclass
class MultimodalBatch:
    visual_embeds: Tensor  # [B, N_v, d_lm]
    text_ids: np.ndarray  # [B, T], right-padded
    label_ids: np.ndarray  # [B, N_v + T]

    @property
    def num_visual(self) -> int:
        return self.visual_embeds.shape[-2]


def assemble(visual_embeds: Tensor, text_ids, tokenizer: Tokenizer, max_seq_len: int | None = None,
             prompt_lengths=None) -> MultimodalBatch:
    """Prepend visual embeddings to text and build next-token labels.

    Position p predicts the token at p+1, so text token t (0-based) is
    supervised at position N_v - 1 + t; visual positions and padding carry the
    ignore marker. ``prompt_lengths[b]`` leading text tokens of sample b are
    additionally left unsupervised (answer-only loss).
    """
    if visual_embeds.ndim == 2:
        visual_embeds = visual_embeds.reshape(1, *visual_embeds.shape)
        text_ids = [text_ids]
    B, Nv = visual_embeds.shape[0], visual_embeds.shape[1]
    if len(text_ids) != B:
        raise ConfigError(f"{len(text_ids)} texts for {B} visual sequences")
    T = max((len(t) for t in text_ids), default=0)
    if max_seq_len is not None and Nv + T > max_seq_len:
        raise LengthError(f"assembled length {Nv + T} exceeds max_seq_len {max_seq_len}")
    text = np.full((B, T), tokenizer.pad, dtype=np.int64)
    labels = np.full((B, Nv + T), IGNORE_INDEX, dtype=np.int64)
    for b, ids in enumerate(text_ids):
        n = len(ids)
        text[b, :n] = ids
        skip = 0 if prompt_lengths is None else prompt_lengths[b]
        for t in range(skip, n):
            p = Nv - 1 + t
            if p >= 0:
                labels[b, p] = ids[t]
    return MultimodalBatch(visual_embeds, text, labels)


def batch_logits(batch: MultimodalBatch, params: ParameterStore, cfg: LMConfig) -> Tensor:
    text = embedding(params["lm.tok_emb"], batch.text_ids)
    seq = concat([batch.visual_embeds, text], axis=-2) if batch.num_visual else text
    return lm_forward(seq, params, cfg)


def lm_loss(batch: MultimodalBatch, params: ParameterStore, cfg: LMConfig) -> Tensor:
    return cross_entropy_logits(batch_logits(batch, params, cfg), batch.label_ids)


# ---------------------------------------------------------------------------
# full model


class MultimodalModel:
    """Composed vision tower + connector + language model sharing one parameter store."""

    def __init__(self, cfg: ModelConfig, params: ParameterStore, tokenizer: Tokenizer | None = None):
        self.cfg = cfg
        self.params = params
        self.tokenizer = tokenizer or Tokenizer()
        if len(self.tokenizer) > cfg.lm.vocab_size:
            raise ConfigError(f"vocabulary of {len(self.tokenizer)} exceeds LM vocab_size {cfg.lm.vocab_size}")

    @property
    def num_visual(self) -> int:
        return self.cfg.num_visual

    def frozen_prefix(self, images) -> fusion.FrozenPrefix:
        with no_grad():
            return fusion.frozen_prefix(np.asarray(images), self.cfg.tower, self.params)

    def vision_tokens(self, images=None, prefix=None) -> Tensor:
        out = fusion.composed_encode(images, self.cfg.tower, self.params, prefix)
        if not self.cfg.include_cls:
            drop = 2 if self.cfg.tower.mode == "interleaved_mof" else 1
            out = out[..., drop:, :]
        return out

    def visual_embeds(self, images=None, prefix=None) -> Tensor:
        return connector_forward(self.vision_tokens(images, prefix), self.params)

    def batch(self, texts, images=None, prefix=None, prompt_lengths=None) -> MultimodalBatch:
        return assemble(self.visual_embeds(images, prefix), texts, self.tokenizer, self.cfg.lm.max_seq_len,
                        prompt_lengths)

    def loss(self, texts, images=None, prefix=None, prompt_lengths=None) -> Tensor:
        return lm_loss(self.batch(texts, images, prefix, prompt_lengths), self.params, self.cfg.lm)

    def logits(self, texts, images=None, prefix=None) -> Tensor:
        return batch_logits(self.batch(texts, images, prefix), self.params, self.cfg.lm)


def build_model(cfg: ModelConfig, seed: int, tokenizer: Tokenizer | None = None) -> MultimodalModel:
    """Fresh model: seeded frozen encoders plus seeded trainable fusion, connector and LM.

    Each component draws from its own derived stream, so e.g. the connector and
    LM weights are identical across tower modes for one seed.
    """
    store = ParameterStore()
    vit.init_params(store, "anchor", cfg.tower.anchor, Rng(derive_seed(seed, "anchor")), frozen=True)
    vit.init_params(store, "augment", cfg.tower.augment, Rng(derive_seed(seed, "augment")), frozen=True)
    fusion.init_params(store, cfg.tower, Rng(derive_seed(seed, "fusion", cfg.tower.mode)))
    init_connector(store, cfg.connector, Rng(derive_seed(seed, "connector")))
    init_lm(store, cfg.lm, Rng(derive_seed(seed, "lm")))
    return MultimodalModel(cfg, store, tokenizer)


# ---------------------------------------------------------------------------
# decoding


def greedy_decode(model: MultimodalModel, images, question_ids, max_new: int, prefix=None,
                  pad_to: int | None = None) -> list:
    """Greedy answers for a batch (or a single image with one question).

    Each step appends the argmax token (lowest id on ties) until ``<eos>`` or
    ``max_new`` tokens. Text is right-padded to a fixed length so a sample's
    logits do not depend on the rest of the batch.
    """
    single = images is not None and np.asarray(images).ndim == 3
    if single:
        images = np.asarray(images)[None]
        question_ids = [question_ids]
    tok = model.tokenizer
    prompts = [[tok.bos, *q] for q in question_ids]
    if max_new <= 0:
        return [] if single else [[] for _ in prompts]
    width = max(len(p) for p in prompts) + max_new
    if pad_to is not None:
        width = max(width, pad_to)
    width = min(width, model.cfg.lm.max_seq_len - model.num_visual)
    answers = [[] for _ in prompts]
    done = [False] * len(prompts)
    lengths = [len(p) for p in prompts]
    text = np.full((len(prompts), width), tok.pad, dtype=np.int64)
    for b, p in enumerate(prompts):
        text[b, : len(p)] = p
    with no_grad():
        vis = model.visual_embeds(images, prefix)
        Nv = vis.shape[-2]
        for _ in range(max_new):
            batch = MultimodalBatch(vis, text, np.zeros((len(prompts), Nv + width), dtype=np.int64))
            logits = batch_logits(batch, model.params, model.cfg.lm).data
            for b in range(len(prompts)):
                if done[b]:
                    continue
                nxt = int(np.argmax(logits[b, Nv + lengths[b] - 1]))
                if nxt == tok.eos:
                    done[b] = True
                    continue
                answers[b].append(nxt)
                if lengths[b] < width:
                    text[b, lengths[b]] = nxt
                    lengths[b] += 1
                else:
                    done[b] = True
            if all(done):
                break
    return answers[0] if single else answers
