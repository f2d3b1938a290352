"""Loss closures and a central finite-difference checker shared by tests."""

from __future__ import annotations

import numpy as np
import torch

from causal_dlm.model import ModelConfig, forward_tensors
from causal_dlm.reorder import MaskedSequence, topological_reorder
from causal_dlm.trainmask import ar_aux_loss, dual_stream_loss, single_stream_loss


def _run(tensors, config, tokens, positions, mask):
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long).unsqueeze(0)
    positions = torch.as_tensor(np.asarray(positions), dtype=torch.long).unsqueeze(0)
    mask = torch.as_tensor(mask).unsqueeze(0)
    logits, _ = forward_tensors(tensors, config, tokens, positions, mask)
    return logits[0]


def causal(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def dual_loss_fn(config: ModelConfig, batch):
    L = batch.length
    mask = batch.visibility.to_mask(0, 2 * L)

    def fn(tensors):
        logits = _run(tensors, config, batch.input_tokens, batch.input_positions, mask)
        return dual_stream_loss(logits[L:], batch)
    return fn


def single_loss_fn(config: ModelConfig, x0, mask_set, gamma=None):
    L = len(x0)
    seq = MaskedSequence.from_mask_positions(x0, range(1, L + 1), mask_set, config.mask_id)
    r = topological_reorder(seq)

    def fn(tensors):
        logits = _run(tensors, config, r.tokens, r.positions, causal(L))
        return single_stream_loss(x0, mask_set, logits, gamma)
    return fn


def ar_loss_fn(config: ModelConfig, x0):
    L = len(x0)

    def fn(tensors):
        return ar_aux_loss(_run(tensors, config, x0, range(1, L + 1), causal(L)), x0)
    return fn


def gradient_check(fn, tensors, step=1e-5, max_entries=None, seed=0):
    """Max relative error between autograd and central differences.

    Relative error per entry is |g - f| / max(|g|, |f|, 1e-6); with
    ``max_entries`` a random subset of entries per tensor is probed.
    """
    leaves = {n: t.detach().clone().to(torch.float64).requires_grad_(True)
              for n, t in tensors.items()}
    fn(leaves).backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, leaf in leaves.items():
            flat = leaf.view(-1)
            grad = leaf.grad.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn(leaves).item()
                flat[i] = orig - step
                down = fn(leaves).item()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                g = grad[i].item()
                worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
    return worst
