"""Command-line entry point: ``ftz <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import data as data_mod
from .checks import TOLERANCE, run_suite
from .config import RunConfig, dump_config, load_config
from .errors import CheckpointError, ConfigError
from .evaluation import compare_towers, evaluate, initial_model, pretrained_lm
from .fusion import map_layers
from .mllm import MultimodalModel, Tokenizer, build_model
from .params import load_checkpoint, read_manifest
from .training import FeatureCache, run_stage, write_metrics

VOCAB_FILE = "vocab.txt"
CONFIG_FILE = "config.toml"
METRICS_FILE = "metrics.csv"
DTYPE_NAMES = {0: "f32", 1: "f64"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror}") from None


def _model_from_checkpoint(cfg: RunConfig, path: str, tokenizer: Tokenizer) -> MultimodalModel:
    """Rebuild the architecture from ``cfg`` and overwrite every tensor from the checkpoint."""
    model = build_model(cfg.model, cfg.seed, tokenizer)
    stored = load_checkpoint(path)
    want, have = set(model.params.names()), set(stored.names())
    if want != have:
        missing = sorted(want - have)[:3]
        extra = sorted(have - want)[:3]
        raise CheckpointError(f"{path}: checkpoint does not match config (missing {missing}, unexpected {extra})")
    for name in model.params.names():
        src = stored[name].data
        if src.shape != model.params[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {src.shape}, config expects {model.params[name].shape}")
        model.params[name].data = src.astype(model.params[name].data.dtype)
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    tok = Tokenizer()
    ds = data_mod.generate_dataset(args.seed, args.n, args.split, tok)
    parent = os.path.dirname(os.path.abspath(args.out))
    _ensure_dir(parent)
    data_mod.save_dataset(ds, args.out)
    counts = {t: sum(1 for s in ds.samples if s.task == t) for t in data_mod.TASKS}
    print(f"wrote {len(ds)} {args.split} samples to {args.out} ({', '.join(f'{t}={n}' for t, n in counts.items())})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tok = Tokenizer()
    _ensure_dir(args.out)
    train = data_mod.generate_dataset(cfg.seed, cfg.data.train_size, "train", tok, cfg.data.tasks)
    stage = cfg.stage(args.stage)
    if args.stage == 1:
        model = initial_model(cfg, cfg.seed, warm_lm=pretrained_lm(cfg, tok), tokenizer=tok)
    else:
        init = os.path.join(args.out, f"stage1_step{cfg.stage1.steps}.ckpt")
        if not os.path.exists(init):
            raise ConfigError(f"stage 2 needs the final stage-1 checkpoint {init}; run --stage 1 first")
        model = _model_from_checkpoint(cfg, init, tok)
    with open(os.path.join(args.out, CONFIG_FILE), "w") as fh:
        fh.write(dump_config(cfg))
    tok.save(os.path.join(args.out, VOCAB_FILE))
    result = run_stage(stage, train, model, out_dir=args.out, cache=FeatureCache(model, train.images))
    write_metrics(result.rows, os.path.join(args.out, METRICS_FILE), append=args.stage == 2)
    last = result.losses[-1] if result.rows else float("nan")
    print(f"stage {args.stage}: {stage.steps} steps, final loss {last:.4f}, checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    ckpt_dir = os.path.dirname(os.path.abspath(args.ckpt))
    cfg_path = args.config or os.path.join(ckpt_dir, CONFIG_FILE)
    if not os.path.exists(cfg_path):
        raise ConfigError(f"no config given and {cfg_path} does not exist")
    cfg = load_config(cfg_path)
    vocab_path = os.path.join(ckpt_dir, VOCAB_FILE)
    tok = Tokenizer.load(vocab_path) if os.path.exists(vocab_path) else Tokenizer()
    ds = data_mod.load_dataset(args.data)
    model = _model_from_checkpoint(cfg, args.ckpt, tok)
    report = evaluate(model, ds, args.max_new or cfg.data.eval_max_new, seed=cfg.seed)
    _ensure_dir(os.path.dirname(os.path.abspath(args.out)))
    with open(args.out, "w", newline="") as fh:
        fh.write(report.to_csv())
    print(" ".join(f"{t}={a:.4f}" for t, a in sorted(report.accuracy.items())))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.instances, args.seed)
    failed = []
    for name, err in results.items():
        ok = err <= TOLERANCE
        print(f"{name},{err:.3e},{'pass' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        raise ValueError(f"gradient check failed for {', '.join(failed)} (tolerance {TOLERANCE:g})")
    return 0


def cmd_map_layers(args) -> int:
    for p in map_layers(args.anchor_depth, args.augment_depth, args.k):
        print(f"{p.anchor_layer},{p.augment_layer}")
    return 0


def cmd_inspect_ckpt(args) -> int:
    try:
        with open(args.path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {args.path}: {exc.strerror}") from None
    records, _ = read_manifest(buf)
    load_checkpoint(args.path)  # full validation: data length and trailing bytes
    print("name,dtype,frozen,shape")
    for name, code, frozen, shape in records:
        print(f"{name},{DTYPE_NAMES[code]},{int(frozen)},{'x'.join(str(d) for d in shape)}")
    return 0


def cmd_compare_towers(args) -> int:
    cfg = load_config(args.config)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    comp = compare_towers(cfg, seeds, out_path=args.out)
    sys.stdout.write(comp.to_csv())
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ftz", description="Composed frozen vision towers for a toy multimodal LM.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic VQA split")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--split", choices=("train", "eval"), required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--out", required=True, help="run directory for checkpoints and metrics.csv")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="defaults to config.toml next to the checkpoint")
    e.add_argument("--max-new", type=int, default=None)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks in 64-bit mode")
    c.add_argument("--instances", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    m = sub.add_parser("map-layers", help="print fusion points as CSV i,j rows")
    m.add_argument("--anchor-depth", type=int, required=True)
    m.add_argument("--augment-depth", type=int, required=True)
    m.add_argument("--k", type=int, required=True)
    m.set_defaults(fn=cmd_map_layers)

    i = sub.add_parser("inspect-ckpt", help="print a checkpoint manifest")
    i.add_argument("--path", required=True)
    i.set_defaults(fn=cmd_inspect_ckpt)

    ct = sub.add_parser("compare-towers", help="train and evaluate all tower modes per seed")
    ct.add_argument("--config", required=True)
    ct.add_argument("--seeds", required=True, help="comma-separated, e.g. 1,2,3")
    ct.add_argument("--out", default=None, help="also write the CSV table here")
    ct.set_defaults(fn=cmd_compare_towers)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    command = "ftz"
    try:
        args = parser.parse_args(argv)
        command = f"ftz {args.command}"
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        return args.fn(args)
    except KeyboardInterrupt:
        print(f"{command}: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # every failure becomes one diagnostic line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"{command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
