"""Two-stage training with strict frozen/trainable partitioning."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError
from .fusion import FrozenPrefix
from .mllm import MultimodalModel, assemble, lm_loss
from .params import NAMESPACES, ParameterStore, save_checkpoint
from .rng import Rng, derive_seed
from .tensor import Tensor, backward, get_default_dtype, matmul, reset_tape

log = logging.getLogger(__name__)

STAGE_GROUPS = {1: frozenset({"fusion", "connector"}), 2: frozenset({"fusion", "connector", "lm"})}
ALWAYS_FROZEN = frozenset({"anchor", "augment"})
SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class StageConfig:
    stage: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 300
    trainable_groups: frozenset = None
    seed: int = 0
    schedule: str = "constant"
    warmup_fraction: float = 0.03
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    ckpt_every: int = 0
    answer_only: bool = True

    def __post_init__(self):
        if self.stage not in STAGE_GROUPS and self.trainable_groups is None:
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        groups = frozenset(self.trainable_groups) if self.trainable_groups is not None else STAGE_GROUPS[self.stage]
        object.__setattr__(self, "trainable_groups", groups)
        if groups & ALWAYS_FROZEN:
            raise ConfigError(f"encoder groups {sorted(groups & ALWAYS_FROZEN)} can never be trainable")
        unknown = groups - set(NAMESPACES)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")


def stage_defaults(stage: int, **overrides) -> StageConfig:
    """Learning rates from the two-stage recipe; batch sizes scaled down 256 -> 16 and 128 -> 8."""
    base = {1: dict(learning_rate=1e-3, batch_size=16), 2: dict(learning_rate=2e-5, batch_size=8)}[stage]
    base.update(overrides)
    return StageConfig(stage=stage, **base)


def group_of(name: str) -> str:
    group = name.split(".", 1)[0]
    if group not in NAMESPACES:
        raise ConfigError(f"parameter {name!r} has unknown namespace {group!r}")
    return group


def partition_parameters(params: ParameterStore, groups) -> tuple:
    """Mark the requested groups trainable and everything else frozen.

    ``groups`` is a StageConfig or a set of group names. Returns
    (trainable names, frozen names).
    """
    if isinstance(groups, StageConfig):
        groups = groups.trainable_groups
    groups = frozenset(groups) - ALWAYS_FROZEN
    trainable, frozen = [], []
    for name in params.names():
        if group_of(name) in groups:
            params.set_frozen(name, False)
            trainable.append(name)
        else:
            params.set_frozen(name, True)
            frozen.append(name)
    return trainable, frozen


class AdamW:
    """Adaptive-moment update with decoupled weight decay over a fixed tensor list."""

    def __init__(self, params: ParameterStore, names, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.names = list(names)
        for n in self.names:
            if params.is_frozen(n):
                raise ConfigError(f"optimizer given frozen tensor {n!r}")
        self.tensors = [params[n] for n in self.names]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in zip(self.names, self.tensors)}
        self.v = {n: np.zeros_like(t.data) for n, t in zip(self.names, self.tensors)}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n, p in zip(self.names, self.tensors):
            g = p.grad
            if g is None:
                continue
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.tensors:
            p.grad = None


def clip_grad_norm(tensors, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(t.grad, dtype=np.float64))) for t in tensors if t.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for t in tensors:
            if t.grad is not None:
                t.grad *= scale
    return total


def lr_at(stage: StageConfig, step: int) -> float:
    """Learning rate for 0-based ``step``."""
    if stage.schedule == "constant":
        return stage.learning_rate
    warm = max(1, int(math.ceil(stage.warmup_fraction * stage.steps)))
    if step < warm:
        return stage.learning_rate * (step + 1) / warm
    span = max(1, stage.steps - warm)
    return stage.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (step - warm + 1) / span))


# ---------------------------------------------------------------------------
# data access


class FeatureCache:
    """Frozen-tower activations for a whole dataset, computed once in fixed chunks."""

    def __init__(self, model: MultimodalModel, images: np.ndarray, chunk: int = 64):
        parts = [model.frozen_prefix(images[i : i + chunk]) for i in range(0, len(images), chunk)]
        first = parts[0]
        self.prefix = FrozenPrefix(
            first.start,
            Tensor(np.concatenate([p.anchor_h.data for p in parts])),
            {j: Tensor(np.concatenate([p.augment[j].data for p in parts])) for j in first.augment},
        )

    def take(self, idx) -> FrozenPrefix:
        return self.prefix.take(np.asarray(idx))


class BatchSampler:
    """Deterministic epoch-wise shuffling seeded per (seed, epoch)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < batch_size:
            raise ConfigError(f"dataset of {n} samples is smaller than batch_size {batch_size}")
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self.epoch, self.pos = 0, 0
        self.order = Rng(derive_seed(seed, "epoch", 0)).permutation(n)

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.epoch += 1
            self.order = Rng(derive_seed(self.seed, "epoch", self.epoch)).permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


# ---------------------------------------------------------------------------
# steps and stages


def train_step(model: MultimodalModel, texts, opt: AdamW, lr: float, images=None, prefix=None,
               clip_norm: float = 1.0, step_index: int = 0, prompt_lengths=None) -> float:
    """forward -> backward -> clip -> update trainable tensors -> clear grads."""
    reset_tape()
    loss = model.loss(texts, images, prefix, prompt_lengths)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step_index}")
    backward(loss)
    grads = [t for t in opt.tensors if t.grad is not None]
    gmax = max((float(np.max(np.abs(t.grad))) for t in grads), default=0.0)
    if not math.isfinite(gmax):
        raise TrainingError(f"non-finite gradient at step {step_index} (max |grad| = {gmax})")
    clip_grad_norm(opt.tensors, clip_norm)
    opt.step(lr)
    opt.zero_grad()
    # stray grads on tensors outside the optimizer must not linger
    for name, t in model.params.items():
        t.grad = None
    return value


@dataclass
class StageResult:
    rows: list = field(default_factory=list)  # (step, stage, loss, lr)
    checkpoint: str | None = None
    checkpoints: list = field(default_factory=list)

    @property
    def losses(self):
        return [r[2] for r in self.rows]


def write_metrics(rows, path, append: bool = False) -> None:
    new = not append or not os.path.exists(path)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["step", "stage", "loss", "lr"])
        for step, stage, loss, lr in rows:
            w.writerow([step, stage, repr(float(loss)), repr(float(lr))])


def prompt_lengths(dataset, idx) -> list:
    """Text tokens before the answer span: ``<bos>`` plus the question."""
    return [1 + len(dataset[i].question_ids) for i in idx]


def run_stage(stage: StageConfig, dataset, model: MultimodalModel, out_dir=None, cache: FeatureCache | None = None,
              log_every: int = 50) -> StageResult:
    """Train ``model`` in place for ``stage.steps`` steps over ``dataset``.

    Writes ``stage{n}_step{k}.ckpt`` every ``ckpt_every`` steps plus the
    initial and final checkpoints when ``out_dir`` is given.
    """
    trainable, _ = partition_parameters(model.params, stage)
    opt = AdamW(model.params, trainable, weight_decay=stage.weight_decay)
    result = StageResult()

    def checkpoint(step):
        if out_dir is None:
            return None
        path = os.path.join(out_dir, f"stage{stage.stage}_step{step}.ckpt")
        try:
            save_checkpoint(model.params, path)
        except OSError as exc:
            raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
        result.checkpoints.append(path)
        return path

    result.checkpoint = checkpoint(0)
    if stage.steps == 0:
        return result
    sampler = BatchSampler(len(dataset), stage.batch_size, derive_seed(stage.seed, "stage", stage.stage))
    if cache is None:
        cache = FeatureCache(model, dataset.images)
    tok = model.tokenizer
    for step in range(stage.steps):
        idx = sampler.next()
        texts = [dataset[i].text_ids(tok) for i in idx]
        lr = lr_at(stage, step)
        loss = train_step(model, texts, opt, lr, prefix=cache.take(idx), clip_norm=stage.clip_norm, step_index=step,
                          prompt_lengths=prompt_lengths(dataset, idx) if stage.answer_only else None)
        result.rows.append((step + 1, stage.stage, loss, lr))
        if log_every and (step + 1) % log_every == 0:
            log.info("stage %d step %d loss %.4f lr %.2e", stage.stage, step + 1, loss, lr)
        if stage.ckpt_every and (step + 1) % stage.ckpt_every == 0 and step + 1 < stage.steps:
            checkpoint(step + 1)
    result.checkpoint = checkpoint(stage.steps)
    return result


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


# ---------------------------------------------------------------------------
# language-model warm-up


def warmup_lm(model: MultimodalModel, dataset, steps: int, lr: float = 1e-3, batch_size: int = 16,
              seed: int = 0, prefix_lengths=None, scene_prefix: bool = True, answer_only: bool = True) -> list:
    """Train ``lm.*`` alone on question answering over a symbolic visual prefix.

    Stands in for a pretrained language model, so a frozen LM in stage 1 can
    already read context from the prefix positions. Each prefix slot holds
    the summed token embeddings of the (color, kind) of shapes centered in
    that patch (``scene_prefix``), or zeros. Batches cycle through
    ``prefix_lengths`` so the result does not depend on one tower's token count.
    """
    from .data import scene_slots

    if steps <= 0:
        return []
    trainable, _ = partition_parameters(model.params, {"lm"})
    opt = AdamW(model.params, trainable)
    lengths = list(prefix_lengths or [model.num_visual])
    sampler = BatchSampler(len(dataset), batch_size, derive_seed(seed, "lm-warmup"))
    tok, cfg = model.tokenizer, model.cfg.lm
    grid = model.cfg.tower.anchor.grid
    offset = 1 if model.cfg.include_cls else 0
    dt = get_default_dtype()
    losses = []
    for step in range(steps):
        idx = sampler.next()
        texts = [dataset[i].text_ids(tok) for i in idx]
        nv = lengths[step % len(lengths)]
        reset_tape()
        if scene_prefix:
            slots = np.stack([scene_slots(dataset[i].meta, tok, grid, nv, cfg.vocab_size, offset) for i in idx])
            vis = matmul(Tensor(slots.astype(dt)), model.params["lm.tok_emb"])
        else:
            vis = Tensor(np.zeros((len(idx), nv, cfg.dim), dtype=dt))
        batch = assemble(vis, texts, tok, cfg.max_seq_len, prompt_lengths(dataset, idx) if answer_only else None)
        loss = lm_loss(batch, model.params, cfg)
        backward(loss)
        clip_grad_norm(opt.tensors, 1.0)
        opt.step(lr)
        opt.zero_grad()
        losses.append(float(loss.data))
    return losses
