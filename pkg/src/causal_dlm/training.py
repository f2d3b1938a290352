"""Training loop for the dual-stream objective with the auxiliary next-token loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError
from .model import ModelConfig, Parameters, forward_tensors, init_params
from .trainmask import build_dual_stream_batch, combined_loss, partition_blocks, visibility_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    block_size: int = 32
    alpha: float = 0.1
    seed: int = 0
    cosine_decay: bool = True
    warmup_steps: int = 50
    grad_clip: float = 1.0
    log_every: int = 100


@dataclass
class TrainResult:
    params: Parameters
    losses: list[dict] = field(default_factory=list)


def collate(corpus: Sequence[Sequence[int]], indices, block_size: int, mask_id: int,
            rng: np.random.Generator):
    """Stack dual-stream batches for equal-length sequences into tensors.

    Returns tokens/positions (N, 2L), per-prediction-slot targets and loss
    weights (N, L), and the clean sequences (N, L).
    """
    L = len(corpus[indices[0]])
    tokens, positions, targets, weights, x0s = [], [], [], [], []
    for i in indices:
        x0 = corpus[i]
        if len(x0) != L:
            raise ContractError("training sequences must share one length")
        b = build_dual_stream_batch(x0, block_size, rng, mask_id=mask_id)
        tokens.append(b.input_tokens)
        positions.append(b.input_positions)
        pred_pos = b.input_positions[L:]
        targets.append(np.asarray(x0, dtype=np.int64)[pred_pos - 1])
        w = np.zeros(L)
        w[b.target_index - L] = 1.0 / np.asarray(b.gammas)[b.target_block]
        weights.append(w)
        x0s.append(x0)
    as_long = lambda a: torch.as_tensor(np.stack(a), dtype=torch.long)
    return (as_long(tokens), as_long(positions), as_long(targets),
            torch.as_tensor(np.stack(weights), dtype=torch.float32), as_long(x0s))


def batch_losses(tensors, config: ModelConfig, tokens, positions, targets, weights, x0,
                 mask: torch.Tensor):
    """(dual-stream loss, next-token loss), each averaged over the batch."""
    N, T = tokens.shape
    L = T // 2
    logits, _ = forward_tensors(tensors, config, tokens, positions, mask.expand(N, T, T))
    pred = logits[:, L:]
    nll = -F.log_softmax(pred, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    dual = (weights.to(nll.dtype) * nll).sum(dim=1).mean()
    mem = logits[:, :L]
    ar = F.cross_entropy(mem[:, :-1].reshape(-1, mem.shape[-1]), x0[:, 1:].reshape(-1))
    return dual, ar


def train(config: ModelConfig, corpus: Sequence[Sequence[int]], settings: TrainSettings,
          init: Parameters | None = None) -> TrainResult:
    if not corpus:
        raise ContractError("empty training corpus")
    L = len(corpus[0])
    if L > config.max_logical_position:
        raise ContractError("training sequences exceed max_logical_position")
    params = init if init is not None else init_params(config, settings.seed)
    if settings.steps == 0:
        return TrainResult(params, [])

    leaves = {n: t.detach().clone().requires_grad_(True) for n, t in params.tensors.items()}
    opt = torch.optim.Adam(leaves.values(), lr=settings.learning_rate)

    def lr_factor(step: int) -> float:
        if step < settings.warmup_steps:
            return (step + 1) / settings.warmup_steps
        if not settings.cosine_decay:
            return 1.0
        progress = (step - settings.warmup_steps) / max(1, settings.steps - settings.warmup_steps)
        return 0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * progress))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_factor)
    rng = np.random.default_rng(settings.seed)
    plan = partition_blocks(L, settings.block_size)
    mask = torch.from_numpy(visibility_matrix(plan) | np.eye(2 * L, dtype=bool)).unsqueeze(0)

    log = []
    for step in range(settings.steps):
        idx = rng.integers(0, len(corpus), size=settings.batch_size)
        tokens, positions, targets, weights, x0 = collate(corpus, idx, settings.block_size,
                                                         config.mask_id, rng)
        dual, ar = batch_losses(leaves, config, tokens, positions, targets, weights, x0, mask)
        loss = combined_loss(dual, ar, settings.alpha)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if settings.grad_clip:
            torch.nn.utils.clip_grad_norm_(list(leaves.values()), settings.grad_clip)
        opt.step()
        sched.step()
        entry = {"step": step, "loss": loss.item(), "dual": dual.item(), "ar": ar.item()}
        log.append(entry)
        if settings.log_every and (step % settings.log_every == 0 or step == settings.steps - 1):
            logger.info("step %d loss %.4f dual %.4f ar %.4f", step, entry["loss"],
                        entry["dual"], entry["ar"])

    trained = Parameters(config, {n: t.detach().clone() for n, t in leaves.items()})
    return TrainResult(trained, log)
