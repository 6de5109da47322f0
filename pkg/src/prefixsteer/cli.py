"""Command-line entry point.

Config precedence, lowest to highest: built-in defaults, the ``--config``
YAML file, ``--set KEY=VALUE`` overrides, then the ``--seed`` / ``--out`` flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, apply_overrides, config_hash, from_dict, load_config, save_config
from .corpus import build_vocab
from .errors import ConfigError, DomainError
from .experiment import (VARIANTS, Artifacts, ablate, all_targets, class_names, eval_prompts,
                         generate_variant, rldaf_key, score, variant_config)
from .metrics import write_csv, write_json

log = logging.getLogger("prefixsteer")


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return apply_overrides(cfg, overrides) if overrides else cfg


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _artifacts(cfg: ExperimentConfig) -> Artifacts:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    return Artifacts(cfg, out)


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    art = _artifacts(cfg)
    art.ensure_lm()
    res = art.pretrain_result
    payload = {"checkpoint": str(Path(cfg.out) / "lm.ckpt"), "config_hash": config_hash(cfg)}
    if res is not None:
        payload.update(heldout_loss=res.heldout_loss, unigram_entropy=res.unigram_entropy,
                       steps=cfg.pretrain.steps)
    _emit(payload)
    return 0


def cmd_train_disc(cfg: ExperimentConfig, args) -> int:
    art = _artifacts(cfg)
    disc, judge = art.ensure_discs()
    _emit({"checkpoint": str(Path(cfg.out) / "disc.ckpt"),
           "judge": str(Path(cfg.out) / "judge.ckpt"),
           "heldout_accuracy": disc.heldout_accuracy,
           "judge_heldout_accuracy": judge.heldout_accuracy,
           "classes": disc.class_names, "config_hash": config_hash(cfg)})
    return 0


def cmd_rldaf(cfg: ExperimentConfig, args) -> int:
    art = _artifacts(cfg)
    art.adapted_for(cfg)
    key = rldaf_key(cfg)[:12]
    out = Path(cfg.out)
    payload = {"checkpoint": str(out / f"adapted-{key}.ckpt"),
               "log": str(out / f"rldaf-{key}.jsonl"), "config_hash": config_hash(cfg)}
    tlog = art.logs.get(rldaf_key(cfg))
    if tlog is not None and tlog.records:
        payload["final"] = tlog.records[-1]
    _emit(payload)
    return 0


def _parse_target(cfg: ExperimentConfig, name: str):
    names = class_names(cfg)
    if name not in names:
        raise DomainError(f"unknown target {name!r} for task {cfg.eval.task}; choose from {names}")
    return all_targets(cfg)[names.index(name)]


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    vocab = build_vocab(cfg.corpus)
    prompts, targets = eval_prompts(cfg)
    row = args.prompt_index
    if args.prompt is not None:
        words = args.prompt.split()
        unknown = [w for w in words if w not in vocab.index]
        if unknown or not words:
            raise DomainError(f"prompt words not in vocabulary: {unknown}")
        prompt = np.array([vocab.ids(words)], dtype=np.int64)
        target = targets[0]
    else:
        if not 0 <= row < len(prompts):
            raise DomainError(f"--prompt-index must lie in [0, {len(prompts)})")
        prompt, target = prompts[row:row + 1], targets[row]
    if args.target is not None:
        target = _parse_target(cfg, args.target)
    art = _artifacts(cfg)
    gen = generate_variant(cfg, art, prompt, [target], rows=[row])
    tokens = [int(t) for t in gen.sequences[0]]
    trace_path = Path(args.trace) if args.trace else Path(cfg.out) / "trace.jsonl"
    gen.trace.to_jsonl(trace_path)
    print(" ".join(vocab.tokens[t] for t in tokens))
    _emit({"tokens": tokens, "target": target.key, "trace": str(trace_path),
           "updates": len(gen.trace.records), "config_hash": config_hash(cfg)})
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    art = _artifacts(cfg)
    prompts, targets = eval_prompts(cfg)
    gen = generate_variant(cfg, art, prompts, targets)
    report = score(cfg, art, gen, targets, args.variant or "model")
    out = Path(cfg.out)
    stem = f"report-{args.variant}" if args.variant else "report"
    write_csv(out / f"{stem}.csv", [report])
    write_json(out / f"{stem}.json", [report])
    _emit(report.to_json())
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    art = _artifacts(cfg)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    res = ablate(cfg, variants, art)
    out = Path(cfg.out)
    write_csv(out / "ablation.csv", res.reports)
    write_json(out / "ablation.json", res.reports)
    with open(out / "orderings.json", "w", encoding="utf-8") as fh:
        json.dump(res.orderings, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print((out / "ablation.csv").read_text(encoding="utf-8"), end="")
    _emit({"orderings": res.orderings, "csv": str(out / "ablation.csv"),
           "config_hash": config_hash(cfg)})
    return 0 if all(res.orderings.values()) or not args.strict else 3


COMMANDS = {
    "pretrain": (cmd_pretrain, "pretrain the toy language model"),
    "train-disc": (cmd_train_disc, "fit the attribute discriminator and the judge"),
    "rldaf": (cmd_rldaf, "fine-tune a low-rank adapter with steered rollouts"),
    "generate": (cmd_generate, "steered generation for one prompt"),
    "evaluate": (cmd_evaluate, "generate for every eval prompt and write metric reports"),
    "ablate": (cmd_ablate, "run every ablation variant and write the comparison table"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--variant", choices=sorted(VARIANTS),
                        help="apply an ablation variant's config delta")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. steer.m=3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="prefixsteer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=text)
               for name, (_, text) in COMMANDS.items()}
    g = parsers["generate"]
    g.add_argument("--prompt", help="space-separated prompt words")
    g.add_argument("--prompt-index", type=int, default=0,
                   help="use this eval prompt (and its decode stream)")
    g.add_argument("--target", help="topic or class name")
    g.add_argument("--trace", metavar="PATH", help="where to write the steering trace")
    a = parsers["ablate"]
    a.add_argument("--variants", help="comma-separated subset of variants")
    a.add_argument("--strict", action="store_true", help="exit 3 if an ordering check fails")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.variant:
            cfg = variant_config(cfg, args.variant)
        return COMMANDS[args.command][0](cfg, args)
    except (ValueError, ArithmeticError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
