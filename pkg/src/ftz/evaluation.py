"""Exact-match evaluation and the three-tower comparison."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from .config import RunConfig
from .errors import ConfigError, TrainingError
from .fusion import MODES
from .mllm import MultimodalModel, Tokenizer, build_model, greedy_decode
from .params import ParameterStore
from .rng import derive_seed
from .training import FeatureCache, partition_parameters, run_stage, warmup_lm

log = logging.getLogger(__name__)

CAPTION_MAX_NEW = 6


@dataclass
class EvalReport:
    accuracy: dict  # task -> fraction correct
    counts: dict  # task -> number of samples
    mode: str
    seed: int
    predictions: list = field(default_factory=list, repr=False)

    @property
    def overall(self) -> float:
        total = sum(self.counts.values())
        return sum(self.accuracy[t] * self.counts[t] for t in self.counts) / total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "seed", "task", "n", "accuracy"])
        for task in sorted(self.counts):
            w.writerow([self.mode, self.seed, task, self.counts[task], f"{self.accuracy[task]:.6f}"])
        return buf.getvalue()


def evaluate(model: MultimodalModel, dataset, max_new: int = 3, caption_max_new: int = CAPTION_MAX_NEW,
             seed: int = 0, batch_size: int = 64, prefix=None) -> EvalReport:
    """Greedy-decode every sample and score exact matches of the answer span per task.

    Count and exist answers get ``max_new`` tokens; captions (five-word
    answers) get ``caption_max_new``.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    if dataset.vocab_fingerprint != model.tokenizer.fingerprint:
        raise ConfigError("dataset vocabulary does not match the model tokenizer")
    pad_to = 1 + max(len(s.question_ids) for s in dataset.samples) + max(max_new, caption_max_new)
    preds = [None] * len(dataset)
    for task in sorted({s.task for s in dataset.samples}):
        budget = caption_max_new if task == "caption" else max_new
        idx = [i for i, s in enumerate(dataset.samples) if s.task == task]
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo : lo + batch_size]
            images = np.stack([dataset[i].image for i in chunk])
            pre = prefix.take(np.asarray(chunk)) if prefix is not None else None
            out = greedy_decode(model, images if pre is None else None,
                                [dataset[i].question_ids for i in chunk], budget, prefix=pre, pad_to=pad_to)
            for i, ans in zip(chunk, out):
                preds[i] = ans
    correct, counts = {}, {}
    for s, p in zip(dataset.samples, preds):
        counts[s.task] = counts.get(s.task, 0) + 1
        correct[s.task] = correct.get(s.task, 0) + int(list(p) == list(s.answer_ids))
    acc = {t: correct[t] / counts[t] for t in counts}
    return EvalReport(acc, counts, model.cfg.tower.mode, seed, preds)


# ---------------------------------------------------------------------------
# pipeline


def pretrained_lm(cfg: RunConfig, tokenizer=None) -> ParameterStore:
    """Warm ``lm.*`` once per config, standing in for a shared pretrained language model.

    The LM depends only on ``cfg.seed`` and its own text corpus, never on the
    tower mode or the comparison seed.
    """
    model = build_model(cfg.model, cfg.seed, tokenizer)
    if cfg.warmup.steps:
        corpus = data_mod.generate_dataset(derive_seed(cfg.seed, "lm-corpus"), cfg.data.train_size, "train",
                                           model.tokenizer, cfg.data.tasks)
        warmup_lm(model, corpus, cfg.warmup.steps, cfg.warmup.lr, cfg.warmup.batch_size, cfg.seed,
                  prefix_lengths=cfg.warmup_prefix_lengths(), answer_only=cfg.stage1.answer_only)
    return lm_snapshot(model)


def initial_model(cfg: RunConfig, seed: int, mode: str | None = None, warm_lm: ParameterStore | None = None,
                  tokenizer=None) -> MultimodalModel:
    """Seeded tower, fusion and connector with the warmed LM copied in."""
    model_cfg = cfg.model if mode is None else replace(cfg.model, tower=replace(cfg.model.tower, mode=mode))
    model = build_model(model_cfg, seed, tokenizer)
    if warm_lm is None:
        warm_lm = pretrained_lm(cfg, tokenizer)
    for name, t in warm_lm.items():
        model.params[name].data = t.data.copy()
    partition_parameters(model.params, set())
    return model


def lm_snapshot(model: MultimodalModel) -> ParameterStore:
    snap = ParameterStore()
    for name in model.params.names("lm"):
        snap.add(name, model.params[name].data.copy(), frozen=True)
    return snap


def train_and_eval(cfg: RunConfig, seed: int, mode: str, train_data, eval_data, warm_lm=None, out_dir=None):
    """Both stages followed by evaluation; returns (report, model, stage results, init hash).

    The init hash covers ``connector.*`` and ``lm.*`` before any training.
    """
    model = initial_model(cfg, seed, mode, warm_lm=warm_lm)
    init_hash = model.params.sha256(("connector", "lm"))
    cache = FeatureCache(model, train_data.images)
    results = []
    for stage_cfg in (cfg.stage1, cfg.stage2):
        stage_cfg = replace(stage_cfg, seed=seed)
        results.append(run_stage(stage_cfg, train_data, model, out_dir=out_dir, cache=cache))
    eval_cache = FeatureCache(model, eval_data.images)
    report = evaluate(model, eval_data, cfg.data.eval_max_new, seed=seed, prefix=eval_cache.prefix)
    return report, model, results, init_hash


@dataclass
class Comparison:
    reports: list  # EvalReport per (mode, seed)
    init_hashes: dict  # seed -> {mode: sha256 of connector + lm at init}

    def rows(self):
        tasks = sorted({t for r in self.reports for t in r.counts})
        out = [["mode", "seed", *tasks]]
        for r in self.reports:
            out.append([r.mode, str(r.seed), *(f"{r.accuracy[t]:.6f}" for t in tasks)])
        for mode in MODES:
            rs = [r for r in self.reports if r.mode == mode]
            if rs:
                out.append([mode, "mean", *(f"{np.mean([r.accuracy[t] for r in rs]):.6f}" for t in tasks)])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.rows())
        return buf.getvalue()

    def mean(self, mode: str, task: str) -> float:
        return float(np.mean([r.accuracy[task] for r in self.reports if r.mode == mode]))


def compare_towers(cfg: RunConfig, seeds, modes=MODES, out_path=None, warm_lm=None) -> Comparison:
    """Train and evaluate every tower mode per seed with identical data, LM and connector init.

    ``warm_lm`` skips the LM warm-up when a snapshot from ``pretrained_lm(cfg)`` is at hand.
    """
    reports, hashes = [], {}
    tokenizer = Tokenizer()
    warm = warm_lm if warm_lm is not None else pretrained_lm(cfg, tokenizer)
    for seed in seeds:
        train_data = data_mod.generate_dataset(seed, cfg.data.train_size, "train", tokenizer, cfg.data.tasks)
        eval_data = data_mod.generate_dataset(seed, cfg.data.eval_size, "eval", tokenizer, cfg.data.tasks)
        hashes[seed] = {}
        for mode in modes:
            report, _, _, hashes[seed][mode] = train_and_eval(cfg, seed, mode, train_data, eval_data, warm_lm=warm)
            log.info("seed %d %s %s", seed, mode, {t: round(a, 4) for t, a in report.accuracy.items()})
            reports.append(report)
        if len(set(hashes[seed].values())) != 1:
            raise TrainingError(f"seed {seed}: connector/LM init differs across tower modes")
    comp = Comparison(reports, hashes)
    if out_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            fh.write(comp.to_csv())
    return comp
