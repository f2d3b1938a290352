"""Command-line entry point: gen-corpus, train, decode, bench, mask-dump."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import bench as benchmod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build_id, load_run_config, parse_list
from .decode import DECODERS
from .errors import ConfigurationError, ContractError
from .synth import CharTokenizer, generate, read_corpus, write_corpus
from .trainmask import build_dual_stream_batch, format_mask_dump
from .training import train

logger = logging.getLogger("causal_dlm")

COMMANDS = ("gen-corpus", "train", "decode", "bench", "mask-dump")


def _metrics(cfg: RunConfig, command: str, **payload) -> dict:
    return {"command": command, "build": build_id(), "config": cfg.to_dict(), **payload}


def _write(path: str, text: str) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_corpora(spec: str, vocab_size: int) -> list[list[int]]:
    if not spec:
        raise ConfigurationError("no corpus given (set corpus=<file>[,<file>...])")
    corpus = []
    for path in spec.split(","):
        path = path.strip()
        if not Path(path).exists():
            raise FileNotFoundError(f"corpus file not found: {path}")
        vocab, seqs = read_corpus(path)
        if vocab != vocab_size:
            raise ConfigurationError(f"{path}: corpus vocab {vocab} != model vocab {vocab_size}")
        corpus.extend(seqs)
    return corpus


def cmd_gen_corpus(cfg: RunConfig) -> dict:
    corpus = generate(cfg.corpus_spec())
    out = cfg.out or f"{cfg.kind}.corpus"
    write_corpus(out, corpus, cfg.vocab_size)
    return _metrics(cfg, "gen-corpus", path=out, num_sequences=len(corpus))


def cmd_train(cfg: RunConfig) -> dict:
    corpus = _load_corpora(cfg.corpus, cfg.vocab_size)
    torch.manual_seed(cfg.seed)
    result = train(cfg.model_config(), corpus, cfg.train_settings())
    save_checkpoint(result.params, result.params.config, cfg.checkpoint)
    losses = result.losses
    summary = {}
    if losses:
        summary = {"initial_dual": losses[0]["dual"], "final_dual": losses[-1]["dual"],
                   "initial_loss": losses[0]["loss"], "final_loss": losses[-1]["loss"]}
    return _metrics(cfg, "train", checkpoint=cfg.checkpoint, summary=summary, losses=losses)


def _load_model(cfg: RunConfig):
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, _ = load_checkpoint(path)
    return params


def cmd_decode(cfg: RunConfig) -> dict:
    params = _load_model(cfg)
    if not cfg.prompts:
        raise ConfigurationError("no prompt file given (set prompts=<corpus file>)")
    vocab, prompts = read_corpus(cfg.prompts)
    if vocab != params.config.vocab_size:
        raise ConfigurationError(
            f"prompt vocab {vocab} does not match checkpoint vocab {params.config.vocab_size}")
    if cfg.strategy not in DECODERS:
        raise ConfigurationError(f"strategy must be one of {sorted(DECODERS)}")
    decoder = DECODERS[cfg.strategy]
    dcfg = cfg.decode_config()
    tok = CharTokenizer(params.config.vocab_size)
    records = []
    for i, prompt in enumerate(prompts):
        prompt = prompt[:cfg.prompt_length] if cfg.prompt_length else prompt
        tokens, stats = decoder(params, prompt, dcfg)
        records.append({
            "index": i,
            "prompt": prompt,
            "tokens": tokens,
            "text": tok.decode(tokens, skip_special=True),
            "stats": stats.to_dict(),
        })
    n_gen = sum(r["stats"]["n_gen"] for r in records)
    n_fwd = sum(r["stats"]["n_fwd"] for r in records)
    forwards = sum(r["stats"]["forwards"] for r in records)
    aggregate = {"n_gen": n_gen, "n_fwd": n_fwd, "forwards": forwards,
                 "p_cache": n_gen / n_fwd if n_fwd else 0.0,
                 "tokens_per_forward": n_gen / forwards if forwards else 0.0}
    return _metrics(cfg, "decode", strategy=cfg.strategy, records=records, aggregate=aggregate)


def cmd_bench(cfg: RunConfig) -> dict:
    params = _load_model(cfg)
    corpus = _load_corpora(cfg.prompts or cfg.corpus, params.config.vocab_size)
    tok = CharTokenizer(params.config.vocab_size)
    prompts = benchmod.make_prompts(corpus, cfg.task, cfg.prompt_length, tok, cfg.max_new_tokens)
    report = benchmod.run_bench(
        params, prompts, cfg.task, cfg.decode_config(),
        parse_list(cfg.sweep_tau), parse_list(cfg.sweep_lambda),
        parse_list(cfg.sweep_window, int), parse_list(cfg.sweep_block, int),
    )
    if cfg.out:
        Path(cfg.out).with_suffix(".csv").write_text(benchmod.to_csv(report), encoding="utf-8")
    sys.stderr.write(benchmod.to_table(report))
    return _metrics(cfg, "bench", report=report)


def cmd_mask_dump(cfg: RunConfig) -> str:
    L, B = cfg.dump_length, cfg.dump_block
    rng = np.random.default_rng(cfg.seed)
    x0 = [i % (cfg.vocab_size - 2) for i in range(L)]
    batch = build_dual_stream_batch(x0, B, rng, mask_id=cfg.vocab_size - 1)
    gammas = " ".join(f"{g:.6f}" for g in batch.gammas)
    header = f"mask-dump L={L} B={B} seed={cfg.seed} mask_id={cfg.vocab_size - 1} gammas={gammas}"
    return format_mask_dump(batch, header)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causal-dlm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key (repeatable)")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            if f.type == "bool":
                p.add_argument(flag, dest=f.name, default=None,
                               type=lambda s: s.lower() in ("1", "true", "yes", "on"))
            else:
                kind = {"int": int, "float": float}.get(f.type, str)
                p.add_argument(flag, dest=f.name, type=kind, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = load_run_config(args.config, args.overrides, flags)
        if args.command == "mask-dump":
            _write(cfg.out, cmd_mask_dump(cfg))
            return 0
        handler = {"gen-corpus": cmd_gen_corpus, "train": cmd_train,
                   "decode": cmd_decode, "bench": cmd_bench}[args.command]
        metrics = handler(cfg)
    except (ConfigurationError, ContractError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    text = json.dumps(metrics, indent=2) + "\n"
    if args.command == "gen-corpus":
        sys.stdout.write(text)
    else:
        _write(cfg.out, text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
