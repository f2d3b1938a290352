"""Dual-stream training batches, their attention pattern, and the training losses.

Physical layout of a batch for a clean sequence ``x0`` of length ``L``::

    [ memory stream: x0 verbatim           | prediction stream: per-block masked copy ]
      positions 1..L                          positions 1..L (permuted inside blocks)

Prediction-stream tokens of block ``k`` see the memory tokens logically before
the block and the physically earlier tokens of their own block, nothing else.
The memory stream is plain causal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError
from .model import VisibilitySpec
from .reorder import MaskedSequence, topological_reorder


@dataclass(frozen=True)
class BlockPlan:
    block_size: int
    blocks: tuple[tuple[int, int], ...]  # (start logical position, length)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def length(self) -> int:
        return sum(n for _, n in self.blocks)

    def block_of(self, position: int) -> int:
        return (position - 1) // self.block_size


def partition_blocks(L: int, B: int) -> BlockPlan:
    if L < 1 or B < 1:
        raise ContractError(f"need L >= 1 and B >= 1, got L={L}, B={B}")
    blocks = tuple((start, min(B, L - start + 1)) for start in range(1, L + 1, B))
    return BlockPlan(B, blocks)


@dataclass(frozen=True)
class BlockMask:
    gamma: float
    masked: tuple[int, ...]  # logical positions, ascending


def mask_count(gamma: float, length: int) -> int:
    # round half up; at least one mask per block
    return min(length, max(1, math.floor(gamma * length + 0.5)))


def sample_block_masks(plan: BlockPlan, rng: np.random.Generator,
                       gammas: Sequence[float] | None = None) -> list[BlockMask]:
    """Draw a masking ratio in (0, 1] per block and a uniform mask set of matching size."""
    out = []
    for k, (start, length) in enumerate(plan.blocks):
        gamma = float(gammas[k]) if gammas is not None else 1.0 - float(rng.random())
        if not 0.0 < gamma <= 1.0:
            raise ContractError(f"gamma must lie in (0, 1], got {gamma}")
        chosen = rng.choice(length, size=mask_count(gamma, length), replace=False)
        out.append(BlockMask(gamma, tuple(sorted(start + int(c) for c in chosen))))
    return out


@dataclass(frozen=True, eq=False)
class DualStreamBatch:
    x0: tuple[int, ...]
    plan: BlockPlan
    block_masks: tuple[BlockMask, ...]
    input_tokens: np.ndarray      # (2L,)
    input_positions: np.ndarray   # (2L,)
    pred_block: np.ndarray        # (L,) block id of each prediction-stream slot
    pred_masked: np.ndarray       # (L,) bool
    target_index: np.ndarray      # physical indices (in 2L) of masked slots
    target_token: np.ndarray
    target_block: np.ndarray
    visibility: VisibilitySpec

    @property
    def length(self) -> int:
        return len(self.x0)

    @property
    def gammas(self) -> tuple[float, ...]:
        return tuple(m.gamma for m in self.block_masks)


def build_dual_stream_batch(x0: Sequence[int], B: int, rng: np.random.Generator, *,
                            mask_id: int, block_masks: Sequence[BlockMask] | None = None,
                            max_logical_position: int | None = None) -> DualStreamBatch:
    L = len(x0)
    if L == 0:
        raise ContractError("cannot build a batch from an empty sequence")
    if max_logical_position is not None and L > max_logical_position:
        raise ContractError(f"sequence length {L} exceeds max position {max_logical_position}")
    x0 = tuple(int(t) for t in x0)
    plan = partition_blocks(L, B)
    if block_masks is None:
        block_masks = sample_block_masks(plan, rng)
    elif len(block_masks) != plan.num_blocks:
        raise ContractError("need one BlockMask per block")

    pred_tokens, pred_positions = [], []
    pred_block, pred_masked = [], []
    t_index, t_token, t_block = [], [], []
    for k, ((start, length), bm) in enumerate(zip(plan.blocks, block_masks)):
        positions = tuple(range(start, start + length))
        if not set(bm.masked) <= set(positions):
            raise ContractError(f"block {k} mask set leaves the block")
        seq = MaskedSequence.from_mask_positions(x0[start - 1:start - 1 + length],
                                                 positions, bm.masked, mask_id)
        r = topological_reorder(seq)
        base = L + start - 1
        for j, (tok, pos) in enumerate(zip(r.tokens, r.positions)):
            is_mask = j >= r.num_observed
            pred_tokens.append(tok)
            pred_positions.append(pos)
            pred_block.append(k)
            pred_masked.append(is_mask)
            if is_mask:
                t_index.append(base + j)
                t_token.append(x0[pos - 1])
                t_block.append(k)

    tokens = np.array(list(x0) + pred_tokens, dtype=np.int64)
    positions = np.array(list(range(1, L + 1)) + pred_positions, dtype=np.int64)
    partial = DualStreamBatch(
        x0=x0, plan=plan, block_masks=tuple(block_masks),
        input_tokens=tokens, input_positions=positions,
        pred_block=np.array(pred_block, dtype=np.int64),
        pred_masked=np.array(pred_masked, dtype=bool),
        target_index=np.array(t_index, dtype=np.int64),
        target_token=np.array(t_token, dtype=np.int64),
        target_block=np.array(t_block, dtype=np.int64),
        visibility=VisibilitySpec.causal(),
    )
    vis = build_visibility(partial, plan)
    object.__setattr__(partial, "visibility", vis)
    return partial


def visibility_matrix(plan: BlockPlan) -> np.ndarray:
    """Dense (2L, 2L) allow-matrix, self excluded."""
    L = plan.length
    m = np.zeros((2 * L, 2 * L), dtype=bool)
    m[:L, :L] = np.tril(np.ones((L, L), dtype=bool), k=-1)
    mem_pos = np.arange(1, L + 1)
    for start, length in plan.blocks:
        rows = slice(L + start - 1, L + start - 1 + length)
        m[rows, :L] = mem_pos < start
        m[rows, rows] = np.tril(np.ones((length, length), dtype=bool), k=-1)
    return m


def build_visibility(batch: DualStreamBatch, plan: BlockPlan) -> VisibilitySpec:
    if plan.length != batch.length or plan.blocks != batch.plan.blocks:
        raise ContractError("block plan does not match the batch")
    return VisibilitySpec(visibility_matrix(plan))


def _nll_rows(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return -F.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def loss_weights(batch: DualStreamBatch) -> np.ndarray:
    gammas = np.array(batch.gammas, dtype=np.float64)
    return 1.0 / gammas[batch.target_block]


def dual_stream_loss(pred_logits: torch.Tensor, batch: DualStreamBatch) -> torch.Tensor:
    """Sum over blocks of (1/gamma_k) * NLL at that block's mask slots.

    ``pred_logits`` has one row per prediction-stream slot (L rows).
    """
    L = batch.length
    if pred_logits.shape[0] != L:
        raise ContractError(f"expected {L} prediction-stream logit rows, got {pred_logits.shape[0]}")
    covered = set((batch.target_index - L).tolist())
    if covered != set(np.flatnonzero(batch.pred_masked).tolist()):
        raise ContractError("every masked prediction slot needs exactly one loss target")
    rows = torch.as_tensor(batch.target_index - L)
    targets = torch.as_tensor(batch.target_token)
    weights = torch.as_tensor(loss_weights(batch), dtype=pred_logits.dtype)
    return (weights * _nll_rows(pred_logits[rows], targets)).sum()


def single_stream_loss(x0: Sequence[int], mask_set, logits_over_reordered: torch.Tensor,
                       gamma: float | None = None) -> torch.Tensor:
    """Masked-token recovery loss for one plain-causal pass over the reordered sequence.

    The j-th mask (ascending logical position m_j) is read at physical row
    ``N_o + j``. ``gamma`` defaults to ``|M| / L``.
    """
    L = len(x0)
    masked = sorted(int(m) for m in mask_set)
    if not masked:
        raise ContractError("at least one masked position is required")
    if masked[0] < 1 or masked[-1] > L:
        raise ContractError("mask positions must lie in [1, L]")
    if logits_over_reordered.shape[0] != L:
        raise ContractError("need one logit row per reordered position")
    if gamma is None:
        gamma = len(masked) / L
    n_obs = L - len(masked)
    rows = torch.arange(n_obs, L)
    targets = torch.as_tensor([int(x0[m - 1]) for m in masked])
    return _nll_rows(logits_over_reordered[rows], targets).sum() / gamma


def ar_aux_loss(logits: torch.Tensor, x0) -> torch.Tensor:
    """Mean next-token NLL; leading batch dimensions are averaged over too."""
    x0 = torch.as_tensor(x0)
    if x0.shape[-1] < 2:
        raise ContractError("next-token loss needs at least two tokens")
    return _nll_rows(logits[..., :-1, :], x0[..., 1:]).mean()


def combined_loss(dual, ar_aux, alpha: float = 0.1):
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * dual + alpha * ar_aux


def format_mask_dump(batch: DualStreamBatch, header: str = "") -> str:
    """Plain-text dump, one row per physical index.

    Columns: index, stream (mem/pred), token id, logical position, block id,
    masked flag, then ``:`` and the visible indices (self excluded).
    """
    L = batch.length
    mask = batch.visibility.to_mask(0, 2 * L)
    np.fill_diagonal(mask, False)
    lines = []
    if header:
        lines.append(f"# {header}")
    lines.append("# index stream token position block masked : visible")
    for i in range(2 * L):
        pos = int(batch.input_positions[i])
        if i < L:
            stream, block, masked = "mem", batch.plan.block_of(pos), 0
        else:
            stream, block, masked = "pred", int(batch.pred_block[i - L]), int(batch.pred_masked[i - L])
        visible = " ".join(str(j) for j in np.flatnonzero(mask[i]))
        row = f"{i} {stream} {int(batch.input_tokens[i])} {pos} {block} {masked} :"
        lines.append(f"{row} {visible}" if visible else row)
    return "\n".join(lines) + "\n"
