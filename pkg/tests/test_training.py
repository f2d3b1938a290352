import numpy as np
import pytest
import torch

from causal_dlm.errors import ContractError
from causal_dlm.model import ModelConfig, forward_tensors, init_params
from causal_dlm.synth import CorpusSpec, generate
from causal_dlm.trainmask import (
    ar_aux_loss,
    build_dual_stream_batch,
    dual_stream_loss,
    partition_blocks,
    visibility_matrix,
)
from causal_dlm.training import TrainSettings, batch_losses, collate, train

CFG = ModelConfig(1, 2, 8, 16, max_logical_position=32)


@pytest.fixture(scope="module")
def corpus():
    return generate(CorpusSpec("counting", 16, 12, 64, seed=0))


def test_batched_losses_match_reference(corpus):
    """The vectorised training loss equals the mean of per-sequence reference losses."""
    params = init_params(CFG, 0).to(torch.float64)
    idx = [0, 5, 9]
    B = 4
    tokens, positions, targets, weights, x0 = collate(corpus, idx, B, CFG.mask_id,
                                                     np.random.default_rng(3))
    L = 12
    mask = torch.from_numpy(visibility_matrix(partition_blocks(L, B)) | np.eye(2 * L, dtype=bool))
    dual, ar = batch_losses(params.tensors, CFG, tokens, positions, targets,
                            weights.double(), x0, mask.unsqueeze(0))

    rng = np.random.default_rng(3)
    ref_dual, ref_ar = [], []
    for i in idx:
        b = build_dual_stream_batch(corpus[i], B, rng, mask_id=CFG.mask_id)
        m = torch.from_numpy(b.visibility.to_mask(0, 2 * L)).unsqueeze(0)
        logits, _ = forward_tensors(params.tensors, CFG,
                                    torch.as_tensor(b.input_tokens).unsqueeze(0),
                                    torch.as_tensor(b.input_positions).unsqueeze(0), m)
        ref_dual.append(dual_stream_loss(logits[0, L:], b))
        ref_ar.append(ar_aux_loss(logits[0, :L], corpus[i]))
    assert float(dual) == pytest.approx(float(torch.stack(ref_dual).mean()), rel=1e-6)  # weights are float32
    assert float(ar) == pytest.approx(float(torch.stack(ref_ar).mean()), rel=1e-6)


def test_zero_steps_returns_init(corpus):
    result = train(CFG, corpus, TrainSettings(steps=0, seed=4))
    assert result.params.equal(init_params(CFG, 4))
    assert result.losses == []


def test_training_deterministic(corpus):
    s = TrainSettings(steps=5, batch_size=4, block_size=4, seed=1)
    a, b = train(CFG, corpus, s), train(CFG, corpus, s)
    assert a.losses == b.losses
    assert a.params.equal(b.params)


def test_training_reduces_loss(corpus):
    result = train(CFG, corpus, TrainSettings(steps=150, batch_size=16, block_size=4,
                                              learning_rate=3e-3, seed=0, warmup_steps=10))
    first = np.mean([e["dual"] for e in result.losses[:10]])
    last = np.mean([e["dual"] for e in result.losses[-10:]])
    assert last < 0.85 * first
    entry = result.losses[0]
    assert set(entry) == {"step", "loss", "dual", "ar"}
    assert entry["loss"] == pytest.approx(0.9 * entry["dual"] + 0.1 * entry["ar"], rel=1e-5)


def test_training_errors():
    with pytest.raises(ContractError):
        train(CFG, [], TrainSettings(steps=1))
    with pytest.raises(ContractError):
        train(CFG, [[1] * 40], TrainSettings(steps=1))
    with pytest.raises(ContractError):
        collate([[1, 2, 3], [1, 2]], [0, 1], 2, CFG.mask_id, np.random.default_rng(0))
