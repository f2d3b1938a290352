"""Streaming parallel decoding plus block-wise and greedy autoregressive baselines.

All three decoders talk to the model through ``model.forward(batch, cache)``
and ``model.config`` (so test stubs can stand in for real parameters) and
report :class:`DecodeStats` for prefix-cacheability accounting.

Accounting conventions (``n_fwd``):

* streaming: every token instance in every post-prefill forward.
* block-wise: the block length per forward. The forward that opens block
  k+1 also carries the finished block k so its keys/values are written with
  the final tokens; those carried instances are reported separately in
  ``processed_instances`` only.
* greedy AR: one per forward (the freshly committed token; the single query
  slot it carries is reported in ``processed_instances``).

Filled tokens whose keys/values would never be read again (the tail of the
generation) are emitted without a further forward in every decoder.
"""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch

from .errors import ConfigurationError, ContractError
from .model import ForwardBatch, VisibilitySpec, entropies, sample_token


@dataclass(frozen=True)
class DecodeConfig:
    window_size: int = 6
    entropy_threshold: float = 0.5
    distance_penalty: float = 0.10
    temperature: float = 0.0
    max_new_tokens: int = 32
    seed: int = 0
    block_size: int = 32
    entropy_temperature: float = 1.0
    distance_mode: str = "slot"  # "slot" | "logical"

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigurationError("window_size must be >= 1")
        if self.block_size < 1:
            raise ConfigurationError("block_size must be >= 1")
        if self.max_new_tokens < 1:
            raise ConfigurationError("max_new_tokens must be >= 1")
        if self.entropy_threshold < 0 or self.distance_penalty < 0 or self.temperature < 0:
            raise ConfigurationError("threshold, penalty and temperature must be nonnegative")
        if not self.entropy_temperature > 0:
            raise ConfigurationError("entropy_temperature must be positive")
        if self.distance_mode not in ("slot", "logical"):
            raise ConfigurationError(f"unknown distance_mode {self.distance_mode!r}")


@dataclass
class DecodeStats:
    n_gen: int = 0
    n_fwd: int = 0
    forwards: int = 0
    committed_per_forward: list[int] = field(default_factory=list)
    processed_instances: int = 0
    wall_time: float = 0.0

    @property
    def p_cache(self) -> float:
        return compute_pcache(self)

    @property
    def tokens_per_forward(self) -> float:
        return self.n_gen / self.forwards if self.forwards else 0.0

    @property
    def commit_histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(self.committed_per_forward).items()))

    def to_dict(self) -> dict:
        return {
            "n_gen": self.n_gen,
            "n_fwd": self.n_fwd,
            "forwards": self.forwards,
            "p_cache": self.p_cache if self.n_fwd else 0.0,
            "tokens_per_forward": self.tokens_per_forward,
            "wall_time": self.wall_time,
            "processed_instances": self.processed_instances,
            "committed_per_forward": {str(k): v for k, v in self.commit_histogram.items()},
        }


def compute_pcache(stats: DecodeStats) -> float:
    if stats.n_fwd <= 0:
        raise ContractError("p_cache is undefined before any post-prefill forward")
    return stats.n_gen / stats.n_fwd


def select_by_entropy(entropies, offsets, tau: float, lam: float) -> list[int]:
    """Mask slots whose distance-adjusted entropy ``H + lam * d`` is below ``tau``.

    When nothing qualifies, the single slot with the smallest adjusted entropy
    is returned (ties go to the smallest distance) so decoding always advances.
    """
    h = np.asarray(entropies, dtype=np.float64)
    d = np.asarray(offsets, dtype=np.float64)
    if h.size == 0:
        raise ContractError("no mask slots to select from")
    if h.shape != d.shape:
        raise ContractError("entropies and offsets differ in length")
    if not np.all(np.isfinite(h)) or np.any(d < 0):
        raise ContractError("entropies must be finite and offsets nonnegative")
    adjusted = h + lam * d
    chosen = np.flatnonzero(adjusted < tau)
    if chosen.size:
        return [int(i) for i in chosen]
    return [int(np.lexsort((d, adjusted))[0])]


@dataclass
class Slot:
    position: int
    token: int | None = None

    @property
    def filled(self) -> bool:
        return self.token is not None


class DecodeWindow:
    """Fixed-size run of slots, each a filled token or a mask, each at a fixed logical position."""

    def __init__(self, positions: Iterable[int] = ()):
        self.slots = [Slot(p) for p in positions]

    def __len__(self) -> int:
        return len(self.slots)

    def reorder(self) -> None:
        """Filled slots first, masks after, each group in logical order."""
        self.slots.sort(key=lambda s: (not s.filled, s.position))

    @property
    def num_filled_prefix(self) -> int:
        n = 0
        while n < len(self.slots) and self.slots[n].filled:
            n += 1
        return n

    @property
    def all_filled(self) -> bool:
        return all(s.filled for s in self.slots)

    def pop_front(self, n: int) -> list[Slot]:
        head, self.slots = self.slots[:n], self.slots[n:]
        return head

    def append_masks(self, positions: Iterable[int]) -> None:
        self.slots.extend(Slot(p) for p in positions)

    def drop_after(self, position: int) -> None:
        self.slots = [s for s in self.slots if s.position <= position]

    def batch(self, mask_id: int) -> ForwardBatch:
        return ForwardBatch(
            [mask_id if s.token is None else s.token for s in self.slots],
            [s.position for s in self.slots],
            VisibilitySpec.causal(),
        )


@dataclass
class ForwardRecord:
    iteration: int
    cache_len: int
    window: list[tuple[bool, int, int]]   # (filled, token id, logical position), physical order
    selected: list[tuple[int, int]]        # (logical position, sampled token)
    committed: int
    logits: np.ndarray | None = None


@dataclass
class DecodeTrace:
    prompt: list[int]
    mask_id: int
    records: list[ForwardRecord] = field(default_factory=list)
    committed: list[tuple[int, int]] = field(default_factory=list)  # (token, position), commit order

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            lines.append(json.dumps({
                "iteration": r.iteration,
                "window": [
                    {"state": "filled" if f else "mask", "token": t, "position": p}
                    for f, t, p in r.window
                ],
                "selected": [list(s) for s in r.selected],
                "committed": r.committed,
            }))
        return "\n".join(lines) + ("\n" if lines else "")


def _check_request(model, prompt, cfg: DecodeConfig) -> None:
    if not isinstance(cfg, DecodeConfig):
        raise ConfigurationError("cfg must be a DecodeConfig")
    if len(prompt) == 0:
        raise ContractError("prompt must be non-empty")
    if len(prompt) + cfg.max_new_tokens > model.config.max_logical_position:
        raise ContractError("prompt length + max_new_tokens exceeds max_logical_position")


def _prefill(model, prompt):
    positions = list(range(1, len(prompt) + 1))
    _, delta = model.forward(ForwardBatch(list(prompt), positions), model.empty_cache())
    return model.empty_cache().extend(delta)


def _offsets(slots: list[Slot], mode: str) -> np.ndarray:
    # slots are the window's masks in physical order, contiguous
    if mode == "logical":
        return np.array([s.position - slots[0].position for s in slots], dtype=np.float64)
    return np.arange(len(slots), dtype=np.float64)


def _finish(committed: dict[int, int], first: int, eos_pos: int | None) -> list[int]:
    out = []
    p = first
    while p in committed and (eos_pos is None or p <= eos_pos):
        out.append(committed[p])
        p += 1
    return out


@torch.no_grad()
def streaming_decode(model, prompt, cfg: DecodeConfig, trace: DecodeTrace | None = None):
    """Sliding-window parallel decoding with immediate prefix commitment.

    Per iteration: reorder the window (filled before masks), one causal
    forward against the cache, commit the filled prefix, fill the confident
    masks, and refill the window with fresh masks at the next positions.
    Returns ``(tokens in logical order, DecodeStats)``.
    """
    _check_request(model, prompt, cfg)
    config = model.config
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    stats = DecodeStats()
    P = len(prompt)
    limit = P + cfg.max_new_tokens
    cache = _prefill(model, prompt)

    window = DecodeWindow(range(P + 1, min(P + cfg.window_size, limit) + 1))
    next_pos = P + len(window) + 1
    committed: dict[int, int] = {}
    eos_pos = None
    iteration = 0

    while len(window):
        window.reorder()
        if window.all_filled and next_pos > limit:
            # nothing left to predict: these keys/values would never be read
            for s in window.pop_front(len(window)):
                committed[s.position] = s.token
                if s.token == config.eos_id and (eos_pos is None or s.position < eos_pos):
                    eos_pos = s.position
            break

        cache_len = len(cache)
        logits_t, delta = model.forward(window.batch(config.mask_id), cache)
        logits = logits_t.detach().to(torch.float64).cpu().numpy()
        stats.forwards += 1
        stats.n_fwd += len(window)
        stats.processed_instances += len(window)
        snapshot = [(s.filled, s.token if s.filled else config.mask_id, s.position)
                    for s in window.slots]

        n = window.num_filled_prefix
        if n:
            cache = cache.extend(delta.select(range(n)))
        for s in window.pop_front(n):
            committed[s.position] = s.token
            if trace is not None:
                trace.committed.append((s.token, s.position))
            if s.token == config.eos_id and (eos_pos is None or s.position < eos_pos):
                eos_pos = s.position
        stats.committed_per_forward.append(n)

        selected = []
        if eos_pos is not None:
            window.drop_after(eos_pos)
            limit = min(limit, eos_pos)
        if len(window):
            masks = window.slots
            rows = logits[n:n + len(masks)]
            h = entropies(rows, cfg.entropy_temperature)
            chosen = select_by_entropy(h, _offsets(masks, cfg.distance_mode),
                                       cfg.entropy_threshold, cfg.distance_penalty)
            for i in chosen:
                masks[i].token = sample_token(rows[i], cfg.temperature, rng)
                selected.append((masks[i].position, masks[i].token))

        if trace is not None:
            trace.records.append(ForwardRecord(iteration, cache_len, snapshot, selected, n, logits))
        iteration += 1

        if eos_pos is not None and all(p in committed for p in range(P + 1, eos_pos + 1)):
            break
        refill = []
        while len(window) + len(refill) < cfg.window_size and next_pos <= limit:
            refill.append(next_pos)
            next_pos += 1
        window.append_masks(refill)

    tokens = _finish(committed, P + 1, eos_pos)
    stats.n_gen = len(tokens)
    stats.wall_time = time.perf_counter() - start
    return tokens, stats


@torch.no_grad()
def blockwise_decode(model, prompt, cfg: DecodeConfig, trace: DecodeTrace | None = None):
    """Stop-and-wait baseline: a block of B masks is refined until every slot is
    filled, and only then committed."""
    _check_request(model, prompt, cfg)
    config = model.config
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    stats = DecodeStats()
    P = len(prompt)
    limit = P + cfg.max_new_tokens
    cache = _prefill(model, prompt)
    committed: dict[int, int] = {}
    carried: list[Slot] = []   # finished block whose keys/values are not yet cached
    eos_pos = None
    iteration = 0
    block_start = P + 1

    while block_start <= limit and eos_pos is None:
        block_len = min(cfg.block_size, limit - block_start + 1)
        block = DecodeWindow(range(block_start, block_start + block_len))
        while not block.all_filled:
            block.reorder()
            slots = carried + block.slots
            batch = ForwardBatch(
                [config.mask_id if s.token is None else s.token for s in slots],
                [s.position for s in slots],
            )
            cache_len = len(cache)
            logits_t, delta = model.forward(batch, cache)
            logits = logits_t.detach().to(torch.float64).cpu().numpy()
            stats.forwards += 1
            stats.n_fwd += block_len
            stats.processed_instances += len(slots)
            snapshot = [(s.filled, s.token if s.filled else config.mask_id, s.position)
                        for s in slots]
            n_carried = len(carried)
            if carried:
                cache = cache.extend(delta.select(range(n_carried)))
                for s in carried:
                    committed[s.position] = s.token
                    if trace is not None:
                        trace.committed.append((s.token, s.position))
                carried = []
            stats.committed_per_forward.append(n_carried)

            first_mask = block.num_filled_prefix
            masks = block.slots[first_mask:]
            rows = logits[n_carried + first_mask:n_carried + len(block)]
            h = entropies(rows, cfg.entropy_temperature)
            selected = []
            for i in select_by_entropy(h, _offsets(masks, cfg.distance_mode),
                                       cfg.entropy_threshold, cfg.distance_penalty):
                masks[i].token = sample_token(rows[i], cfg.temperature, rng)
                selected.append((masks[i].position, masks[i].token))
            if trace is not None:
                trace.records.append(
                    ForwardRecord(iteration, cache_len, snapshot, selected, n_carried, logits))
            iteration += 1

        block.reorder()
        carried = list(block.slots)
        eos = [s.position for s in carried if s.token == config.eos_id]
        if eos:
            eos_pos = min(eos)
        block_start += block_len

    # last finished block: emitted without a key/value-writing forward
    for s in carried:
        committed[s.position] = s.token
    tokens = _finish(committed, P + 1, eos_pos)
    stats.n_gen = len(tokens)
    stats.wall_time = time.perf_counter() - start
    return tokens, stats


@torch.no_grad()
def ar_greedy_decode(model, prompt, cfg: DecodeConfig, trace: DecodeTrace | None = None):
    """One token per forward: the forward that caches token t also predicts t+1
    from a single mask slot at the next logical position."""
    _check_request(model, prompt, cfg)
    config = model.config
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    stats = DecodeStats()
    P = len(prompt)
    cache = _prefill(model, prompt)
    tokens: list[int] = []
    pending: int | None = None

    for step in range(cfg.max_new_tokens):
        pos = P + step + 1
        if pending is None:
            batch = ForwardBatch([config.mask_id], [pos])
        else:
            batch = ForwardBatch([pending, config.mask_id], [pos - 1, pos])
        cache_len = len(cache)
        logits_t, delta = model.forward(batch, cache)
        stats.forwards += 1
        stats.n_fwd += 1
        stats.processed_instances += len(batch.tokens)
        committed = 0
        if pending is not None:
            cache = cache.extend(delta.select([0]))
            committed = 1
            if trace is not None:
                trace.committed.append((pending, pos - 1))
        stats.committed_per_forward.append(committed)
        row = logits_t[-1].detach().to(torch.float64).cpu().numpy()
        pending = sample_token(row, cfg.temperature, rng)
        tokens.append(pending)
        if trace is not None:
            window = [(True, t, p) for t, p in zip(batch.tokens[:-1], batch.positions[:-1])]
            window.append((False, config.mask_id, pos))
            trace.records.append(ForwardRecord(
                step, cache_len, window, [(pos, pending)], committed,
                logits_t.detach().to(torch.float64).cpu().numpy()))
        if pending == config.eos_id:
            break

    stats.n_gen = len(tokens)
    stats.wall_time = time.perf_counter() - start
    return tokens, stats


DECODERS = {
    "streaming": streaming_decode,
    "blockwise": blockwise_decode,
    "ar": ar_greedy_decode,
}


@torch.no_grad()
def commit_equivalence_check(model, trace: DecodeTrace, atol: float = 1e-4) -> bool:
    """Recompute every traced forward from scratch and compare logits.

    For each record the full sequence ``[prompt; tokens committed so far;
    window snapshot]`` is run under a plain causal mask with no cache. If the
    cached path matches everywhere, committed keys/values never needed
    recomputation.
    """
    config = model.config
    P = len(trace.prompt)
    prompt_pos = list(range(1, P + 1))
    for record in trace.records:
        if record.logits is None:
            continue
        prefix = trace.committed[:record.cache_len - P]
        tokens = list(trace.prompt) + [t for t, _ in prefix] + [t for _, t, _ in record.window]
        positions = prompt_pos + [p for _, p in prefix] + [p for _, _, p in record.window]
        logits, _ = model.forward(ForwardBatch(tokens, positions), model.empty_cache())
        full = logits[-len(record.window):].detach().to(torch.float64).cpu().numpy()
        if full.shape != record.logits.shape:
            return False
        if not np.max(np.abs(full - record.logits)) <= atol:
            return False
    return True
