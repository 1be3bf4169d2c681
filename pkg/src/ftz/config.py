"""TOML run configuration: ``seed`` plus ``[model]``, ``[stage1]``, ``[stage2]`` and ``[data]`` tables."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import vit
from .data import TASKS
from .errors import ConfigError
from .fusion import ComposedEncoderConfig
from .mllm import LMConfig, ModelConfig
from .training import StageConfig, stage_defaults


@dataclass(frozen=True)
class WarmupConfig:
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 16


@dataclass(frozen=True)
class DataConfig:
    train_size: int = 2000
    eval_size: int = 300
    tasks: tuple = TASKS
    eval_max_new: int = 3


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    stage1: StageConfig = field(default_factory=lambda: stage_defaults(1))
    stage2: StageConfig = field(default_factory=lambda: stage_defaults(2, steps=100))
    data: DataConfig = field(default_factory=DataConfig)

    def stage(self, n: int) -> StageConfig:
        if n not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {n}")
        return replace(self.stage1 if n == 1 else self.stage2, seed=self.seed)

    def warmup_prefix_lengths(self) -> list:
        """Visual-prefix lengths of every tower mode, so the warmed LM is mode-independent."""
        tower = self.model.tower
        lengths = set()
        for mode in ("anchor_only", "interleaved_mof"):
            try:
                t = replace(tower, mode=mode)
            except ConfigError:
                continue
            lengths.add(replace(self.model, tower=t).num_visual)
        return sorted(lengths)


# keys under [model]; anchor_* / augment_* / lm_* are routed to the sub-configs
_MODEL_KEYS = {"mode", "num_fusion_points", "fusion_heads", "include_cls", "connector_hidden",
               "image_size", "patch_size", "lm_warmup_steps", "lm_warmup_lr", "lm_warmup_batch_size"}
_VIT_KEYS = {"depth", "dim", "heads", "mlp_ratio"}
_LM_KEYS = {f.name for f in fields(LMConfig)}
_STAGE_KEYS = {"learning_rate", "batch_size", "steps", "schedule", "warmup_fraction", "weight_decay",
               "clip_norm", "ckpt_every", "answer_only"}
_DATA_KEYS = {f.name for f in fields(DataConfig)}


def _check(table: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _model(m: dict):
    allowed = _MODEL_KEYS | {f"anchor_{k}" for k in _VIT_KEYS} | {f"augment_{k}" for k in _VIT_KEYS} \
        | {f"lm_{k}" for k in _LM_KEYS}
    _check(m, allowed, "[model]")
    shared = {k: m[k] for k in ("image_size", "patch_size") if k in m}
    anchor = replace(vit.ANCHOR_DEFAULT, **shared, **{k: m[f"anchor_{k}"] for k in _VIT_KEYS if f"anchor_{k}" in m})
    augment = replace(vit.AUGMENT_DEFAULT, **shared, **{k: m[f"augment_{k}"] for k in _VIT_KEYS if f"augment_{k}" in m})
    tower = ComposedEncoderConfig(anchor, augment, m.get("mode", "ftz"), m.get("num_fusion_points", 4),
                                  m.get("fusion_heads", 4))
    lm = LMConfig(**{k: m[f"lm_{k}"] for k in _LM_KEYS if f"lm_{k}" in m})
    model = ModelConfig(tower, lm, m.get("connector_hidden", 64), bool(m.get("include_cls", False)))
    warm = WarmupConfig(m.get("lm_warmup_steps", 3000), m.get("lm_warmup_lr", 1e-3), m.get("lm_warmup_batch_size", 16))
    return model, warm


def from_dict(raw: dict) -> RunConfig:
    _check(raw, {"seed", "model", "stage1", "stage2", "data"}, "top level")
    try:
        model, warm = _model(raw.get("model", {}))
        stages = []
        for n in (1, 2):
            table = raw.get(f"stage{n}", {})
            _check(table, _STAGE_KEYS, f"[stage{n}]")
            if n == 2:
                table = {"steps": 100, **table}
            stages.append(stage_defaults(n, **table))
        d = dict(raw.get("data", {}))
        _check(d, _DATA_KEYS, "[data]")
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
            for t in d["tasks"]:
                if t not in TASKS:
                    raise ConfigError(f"unknown task {t!r} in [data]")
        data = DataConfig(**d)
        seed = int(raw.get("seed", 0))
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    if seed < 0 or seed >= 2**64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    return RunConfig(seed, model, warm, stages[0], stages[1], data)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    """Serialize back to the TOML key set accepted by ``load_config``."""
    t = cfg.model.tower
    model = {
        "mode": t.mode, "num_fusion_points": t.num_fusion_points, "fusion_heads": t.fusion_heads,
        "include_cls": cfg.model.include_cls, "connector_hidden": cfg.model.connector_hidden,
        "image_size": t.anchor.image_size, "patch_size": t.anchor.patch_size,
        "lm_warmup_steps": cfg.warmup.steps, "lm_warmup_lr": cfg.warmup.lr,
        "lm_warmup_batch_size": cfg.warmup.batch_size,
    }
    for side, vc in (("anchor", t.anchor), ("augment", t.augment)):
        for k in sorted(_VIT_KEYS):
            model[f"{side}_{k}"] = getattr(vc, k)
    for k in sorted(_LM_KEYS):
        model[f"lm_{k}"] = getattr(cfg.model.lm, k)
    out = [f"seed = {cfg.seed}", "", "[model]"]
    out += [f"{k} = {_fmt(v)}" for k, v in model.items()]
    for n, st in ((1, cfg.stage1), (2, cfg.stage2)):
        out += ["", f"[stage{n}]"]
        out += [f"{k} = {_fmt(getattr(st, k))}" for k in sorted(_STAGE_KEYS)]
    out += ["", "[data]"]
    out += [f"{f.name} = {_fmt(getattr(cfg.data, f.name))}" for f in fields(DataConfig)]
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return repr(v)
