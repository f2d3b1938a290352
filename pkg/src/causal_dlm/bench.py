"""Decoder comparison harness: sweeps tau/lambda/W/B over held-out prompts."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import replace
from typing import Sequence

from .decode import DecodeConfig, DecodeStats, ar_greedy_decode, blockwise_decode, streaming_decode
from .errors import ConfigurationError
from .synth import CharTokenizer, check_arithmetic

TASKS = ("counting", "arithmetic", "random")


def make_prompts(corpus: Sequence[Sequence[int]], task: str, prompt_length: int,
                 tokenizer: CharTokenizer, max_new_tokens: int) -> list[tuple[list[int], list[int]]]:
    """Split held-out sequences into (prompt, reference continuation).

    Arithmetic prompts end right after an ``=`` so the next tokens are a sum.
    """
    if task not in TASKS:
        raise ConfigurationError(f"task must be one of {TASKS}")
    eq = tokenizer.encode("=")[0] if task == "arithmetic" else None
    out = []
    for seq in corpus:
        cut = prompt_length
        if eq is not None:
            later = [i for i, t in enumerate(seq) if t == eq and i + 1 >= prompt_length]
            if not later:
                continue
            cut = later[0] + 1
        if cut >= len(seq):
            continue
        out.append((list(seq[:cut]), list(seq[cut:cut + max_new_tokens])))
    return out


def score(task: str, tokenizer: CharTokenizer, prompt, reference, output) -> float | None:
    """Exact-match accuracy for one generation; None where it is undefined."""
    if task == "counting":
        return float(list(output[:len(reference)]) == list(reference))
    if task == "arithmetic":
        text = tokenizer.decode(prompt, skip_special=True)
        head = text[text.rfind(";") + 1:]
        generated = tokenizer.decode(output, skip_special=True)
        if ";" not in generated:
            return 0.0   # answer never terminated
        total, correct = check_arithmetic(head + generated.split(";", 1)[0] + ";")
        return float(total == 1 and correct == 1)
    return None


def _aggregate(stats: list[DecodeStats], accuracies: list) -> dict:
    n_gen = sum(s.n_gen for s in stats)
    n_fwd = sum(s.n_fwd for s in stats)
    forwards = sum(s.forwards for s in stats)
    scored = [a for a in accuracies if a is not None]
    return {
        "n_gen": n_gen,
        "n_fwd": n_fwd,
        "forwards": forwards,
        "p_cache": n_gen / n_fwd if n_fwd else 0.0,
        "tokens_per_forward": n_gen / forwards if forwards else 0.0,
        "accuracy": sum(scored) / len(scored) if scored else None,
        "wall_time": sum(s.wall_time for s in stats),
        "per_prompt_n_fwd": [s.n_fwd for s in stats],
        "per_prompt_tokens_per_forward": [s.tokens_per_forward for s in stats],
    }


def run_decoder(decoder, model, prompts, cfg: DecodeConfig, task: str,
                tokenizer: CharTokenizer) -> dict:
    stats, accs = [], []
    for prompt, reference in prompts:
        out, st = decoder(model, prompt, cfg)
        stats.append(st)
        accs.append(score(task, tokenizer, prompt, reference, out))
    return _aggregate(stats, accs)


def run_bench(model, prompts, task: str, base: DecodeConfig, taus, lambdas, windows,
              blocks) -> dict:
    """Compare streaming and block-wise decoding on every (tau, lambda, W, B) cell."""
    grid = list(itertools.product(taus, lambdas, windows, blocks))
    if not grid:
        raise ConfigurationError("the sweep grid is empty")
    if not prompts:
        raise ConfigurationError("no prompts to benchmark")
    tokenizer = CharTokenizer(model.config.vocab_size)
    baseline = run_decoder(ar_greedy_decode, model, prompts, base, task, tokenizer)
    cells = []
    for tau, lam, window, block in grid:
        cfg = replace(base, entropy_threshold=float(tau), distance_penalty=float(lam),
                      window_size=int(window), block_size=int(block))
        stream = run_decoder(streaming_decode, model, prompts, cfg, task, tokenizer)
        blockwise = run_decoder(blockwise_decode, model, prompts, cfg, task, tokenizer)
        cells.append({
            "tau": float(tau), "lambda": float(lam), "window": int(window), "block": int(block),
            "streaming": stream,
            "blockwise": blockwise,
            "nfwd_ratio_stream_over_block": stream["n_fwd"] / blockwise["n_fwd"],
            "forwards_ratio_block_over_stream": blockwise["forwards"] / stream["forwards"],
            "nfwd_ratio_block_over_stream": blockwise["n_fwd"] / stream["n_fwd"],
        })
    return {"task": task, "num_prompts": len(prompts), "ar_baseline": baseline, "cells": cells}


CSV_COLUMNS = [
    "tau", "lambda", "window", "block",
    "stream_accuracy", "stream_tokens_per_forward", "stream_p_cache", "stream_n_fwd",
    "block_accuracy", "block_tokens_per_forward", "block_p_cache", "block_n_fwd",
    "nfwd_ratio_stream_over_block", "nfwd_ratio_block_over_stream",
]


def _row(cell: dict) -> dict:
    s, b = cell["streaming"], cell["blockwise"]
    return {
        "tau": cell["tau"], "lambda": cell["lambda"], "window": cell["window"], "block": cell["block"],
        "stream_accuracy": s["accuracy"], "stream_tokens_per_forward": s["tokens_per_forward"],
        "stream_p_cache": s["p_cache"], "stream_n_fwd": s["n_fwd"],
        "block_accuracy": b["accuracy"], "block_tokens_per_forward": b["tokens_per_forward"],
        "block_p_cache": b["p_cache"], "block_n_fwd": b["n_fwd"],
        "nfwd_ratio_stream_over_block": cell["nfwd_ratio_stream_over_block"],
        "nfwd_ratio_block_over_stream": cell["nfwd_ratio_block_over_stream"],
    }


def to_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for cell in report["cells"]:
        writer.writerow(_row(cell))
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def to_table(report: dict) -> str:
    headers = ["tau", "lambda", "W", "B", "acc(s)", "tok/fwd(s)", "p_cache(s)",
               "acc(b)", "tok/fwd(b)", "p_cache(b)", "n_fwd b/s"]
    rows = []
    for cell in report["cells"]:
        r = _row(cell)
        rows.append([_fmt(r["tau"]), _fmt(r["lambda"]), _fmt(r["window"]), _fmt(r["block"]),
                     _fmt(r["stream_accuracy"]), _fmt(r["stream_tokens_per_forward"]),
                     _fmt(r["stream_p_cache"]), _fmt(r["block_accuracy"]),
                     _fmt(r["block_tokens_per_forward"]), _fmt(r["block_p_cache"]),
                     _fmt(r["nfwd_ratio_block_over_stream"])])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    line = lambda cols: "  ".join(c.rjust(w) for c, w in zip(cols, widths))
    base = report["ar_baseline"]
    out = [f"task={report['task']} prompts={report['num_prompts']} "
           f"ar: acc={_fmt(base['accuracy'])} p_cache={_fmt(base['p_cache'])}",
           line(headers), line(["-" * w for w in widths])]
    out.extend(line(r) for r in rows)
    return "\n".join(out) + "\n"
