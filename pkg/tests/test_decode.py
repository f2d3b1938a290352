import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_dlm.decode import (
    DECODERS,
    DecodeConfig,
    DecodeStats,
    DecodeTrace,
    DecodeWindow,
    ar_greedy_decode,
    blockwise_decode,
    commit_equivalence_check,
    compute_pcache,
    select_by_entropy,
    streaming_decode,
)
from causal_dlm.errors import ConfigurationError, ContractError
from causal_dlm.model import KvCache, ModelConfig, init_params

from stubs import EosStub, LeftToRightStub, OracleStub

PROMPT = [1, 2, 3]


def random_model(seed, vocab=12):
    return init_params(ModelConfig(2, 2, 8, vocab, max_logical_position=64), seed)


def random_prompt(seed, vocab=12, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 8))
    return rng.integers(0, vocab - 2, size=n).tolist()


# --- selection ------------------------------------------------------------------------

def test_select_example():
    assert select_by_entropy([0.05, 0.40, 0.10], [0, 1, 2], tau=0.3, lam=0.1) == [0]


def test_select_strict_inequality():
    assert select_by_entropy([0.3], [0], tau=0.3, lam=0.0) == [0]  # forced pick, not threshold
    assert select_by_entropy([0.1, 0.3, 0.2], [0, 1, 2], tau=0.3, lam=0.0) == [0, 2]


def test_select_lambda_zero_is_plain_threshold():
    h = [0.5, 0.1, 0.9, 0.2]
    assert select_by_entropy(h, [0, 1, 2, 3], tau=0.4, lam=0.0) == [1, 3]


def test_select_forced_pick_tie_to_leftmost():
    assert select_by_entropy([2.0, 2.0], [0, 1], tau=0.1, lam=0.0) == [0]
    assert select_by_entropy([2.0, 1.0], [0, 1], tau=0.1, lam=0.1) == [1]
    assert select_by_entropy([1.1, 1.0], [0, 1], tau=0.1, lam=0.1) == [0]  # 1.1 vs 1.1: d breaks tie


def test_select_errors():
    with pytest.raises(ContractError):
        select_by_entropy([], [], 0.5, 0.1)
    with pytest.raises(ContractError):
        select_by_entropy([0.1], [-1], 0.5, 0.1)
    with pytest.raises(ContractError):
        select_by_entropy([float("nan")], [0], 0.5, 0.1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=10), st.floats(0, 3), st.floats(0, 2))
def test_select_properties(h, tau, lam):
    d = list(range(len(h)))
    chosen = select_by_entropy(h, d, tau, lam)
    assert chosen
    adjusted = [x + lam * i for x, i in zip(h, d)]
    passing = [i for i, a in enumerate(adjusted) if a < tau]
    if passing:
        assert chosen == passing
    else:
        assert len(chosen) == 1 and adjusted[chosen[0]] == min(adjusted)


# --- p_cache ---------------------------------------------------------------------------

def test_compute_pcache():
    assert compute_pcache(DecodeStats(n_gen=100, n_fwd=100)) == 1.0
    assert compute_pcache(DecodeStats(n_gen=8, n_fwd=12)) == pytest.approx(0.6667, abs=1e-4)
    assert compute_pcache(DecodeStats(n_gen=0, n_fwd=3)) == 0.0
    with pytest.raises(ContractError):
        compute_pcache(DecodeStats(n_gen=0, n_fwd=0))


# --- stub traces (hand simulation) ---------------------------------------------------------

def test_streaming_stub_trace_W4():
    stub = OracleStub()
    trace = DecodeTrace(PROMPT, stub.config.mask_id)
    cfg = DecodeConfig(window_size=4, entropy_threshold=10.0, max_new_tokens=8)
    tokens, stats = streaming_decode(stub, PROMPT, cfg, trace)
    assert tokens == [stub.rule(p) for p in range(4, 12)]
    # fwd1: four masks, all filled; fwd2: four filled, all committed, masks for 8..11
    # appended; fwd3: those four filled; the tail is final and needs no forward
    expected = [
        ([False] * 4, [4, 5, 6, 7], 0, 4),
        ([True] * 4, [4, 5, 6, 7], 4, 0),
        ([False] * 4, [8, 9, 10, 11], 0, 4),
    ]
    got = [([f for f, _, _ in r.window], [p for _, _, p in r.window], r.committed, len(r.selected))
           for r in trace.records]
    assert got == expected
    assert (stats.n_gen, stats.n_fwd, stats.forwards) == (8, 12, 3)
    assert stats.p_cache == pytest.approx(8 / 12, abs=0)
    assert [len(c[0]) for c in stub.calls] == [3, 4, 4, 4]  # prefill then three windows


def test_blockwise_stub_one_pass_per_block():
    stub = OracleStub()
    cfg = DecodeConfig(block_size=4, entropy_threshold=10.0, max_new_tokens=8)
    tokens, stats = blockwise_decode(stub, PROMPT, cfg)
    assert tokens == [stub.rule(p) for p in range(4, 12)]
    assert (stats.n_gen, stats.n_fwd, stats.forwards) == (8, 8, 2)
    assert stats.p_cache == 1.0
    # the second block's forward carries the first block so its keys/values are cached
    assert stub.calls[2][1] == [4, 5, 6, 7, 8, 9, 10, 11]


@pytest.mark.parametrize("B", [1, 2, 3, 4, 6])
def test_blockwise_left_to_right_worst_case(B):
    stub = LeftToRightStub()
    cfg = DecodeConfig(block_size=B, entropy_threshold=0.5, distance_penalty=0.0,
                       max_new_tokens=2 * B)
    tokens, stats = blockwise_decode(stub, PROMPT, cfg)
    assert tokens == [stub.rule(p) for p in range(4, 4 + 2 * B)]
    assert stats.forwards == 2 * B
    assert stats.n_fwd == 2 * B * B
    assert stats.p_cache == pytest.approx(1 / B)


def test_streaming_left_to_right_stub():
    stub = LeftToRightStub()
    cfg = DecodeConfig(window_size=4, entropy_threshold=0.5, distance_penalty=0.0, max_new_tokens=8)
    tokens, stats = streaming_decode(stub, PROMPT, cfg)
    assert tokens == [stub.rule(p) for p in range(4, 12)]
    # one fill per forward; each forward after the first commits exactly one token
    assert stats.forwards == 8
    assert stats.committed_per_forward == [0] + [1] * 7


def test_ar_stub_accounting():
    stub = OracleStub()
    tokens, stats = ar_greedy_decode(stub, PROMPT, DecodeConfig(max_new_tokens=8))
    assert tokens == [stub.rule(p) for p in range(4, 12)]
    assert stats.n_fwd == stats.n_gen == stats.forwards == 8
    assert stats.p_cache == 1.0


# --- EOS and limits --------------------------------------------------------------------------

@pytest.mark.parametrize("decoder", [streaming_decode, blockwise_decode, ar_greedy_decode])
def test_eos_truncates(decoder):
    stub = EosStub(eos_at=6)
    cfg = DecodeConfig(window_size=4, block_size=4, entropy_threshold=10.0, max_new_tokens=8)
    tokens, stats = decoder(stub, PROMPT, cfg)
    assert tokens == [stub.rule(4), stub.rule(5), stub.config.eos_id]
    assert stats.n_gen == 3


def test_window_clamped_near_budget():
    stub = OracleStub()
    trace = DecodeTrace(PROMPT, stub.config.mask_id)
    cfg = DecodeConfig(window_size=6, entropy_threshold=10.0, max_new_tokens=4)
    tokens, stats = streaming_decode(stub, PROMPT, cfg, trace)
    assert len(tokens) == 4
    assert max(p for r in trace.records for _, _, p in r.window) == len(PROMPT) + 4


@pytest.mark.parametrize("decoder", list(DECODERS.values()))
def test_request_validation(decoder):
    stub = OracleStub(max_logical_position=10)
    with pytest.raises(ContractError):
        decoder(stub, [], DecodeConfig())
    with pytest.raises(ContractError):
        decoder(stub, [1, 2, 3], DecodeConfig(max_new_tokens=8))


@pytest.mark.parametrize("kwargs", [
    dict(window_size=0), dict(block_size=0), dict(max_new_tokens=0),
    dict(entropy_threshold=-1.0), dict(distance_penalty=-0.1), dict(temperature=-1.0),
    dict(entropy_temperature=0.0), dict(distance_mode="ordinal"),
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        DecodeConfig(**kwargs)


def test_config_defaults():
    cfg = DecodeConfig()
    assert (cfg.window_size, cfg.distance_penalty, cfg.block_size) == (6, 0.10, 32)


# --- window ---------------------------------------------------------------------------------

def test_window_reorder_and_pop():
    w = DecodeWindow([5, 6, 7, 8])
    w.slots[1].token = 9
    w.slots[3].token = 4
    w.reorder()
    assert [(s.position, s.filled) for s in w.slots] == [(6, True), (8, True), (5, False), (7, False)]
    assert w.num_filled_prefix == 2
    assert [s.position for s in w.pop_front(2)] == [6, 8]
    w.append_masks([9])
    w.drop_after(7)
    assert [s.position for s in w.slots] == [5, 7]
    assert w.batch(15).tokens == [15, 15]


# --- equivalences on random models ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_streaming_W1_matches_ar(seed):
    model, prompt = random_model(seed), random_prompt(seed)
    cfg = DecodeConfig(window_size=1, max_new_tokens=10)
    assert streaming_decode(model, prompt, cfg)[0] == ar_greedy_decode(model, prompt, cfg)[0]


@pytest.mark.parametrize("seed", range(8))
def test_blockwise_B1_matches_ar(seed):
    model, prompt = random_model(seed), random_prompt(seed)
    cfg = DecodeConfig(block_size=1, max_new_tokens=10)
    assert blockwise_decode(model, prompt, cfg)[0] == ar_greedy_decode(model, prompt, cfg)[0]


@pytest.mark.parametrize("seed", range(8))
def test_huge_lambda_matches_W1(seed):
    model, prompt = random_model(seed), random_prompt(seed)
    big = DecodeConfig(window_size=6, distance_penalty=1e9, max_new_tokens=10)
    one = DecodeConfig(window_size=1, max_new_tokens=10)
    assert streaming_decode(model, prompt, big)[0] == streaming_decode(model, prompt, one)[0]


def test_ar_independent_of_seed_at_temperature_zero():
    model, prompt = random_model(3), random_prompt(3)
    outs = {tuple(ar_greedy_decode(model, prompt, DecodeConfig(seed=s, max_new_tokens=8))[0])
            for s in range(4)}
    assert len(outs) == 1


@pytest.mark.parametrize("decoder", list(DECODERS.values()))
def test_sampling_deterministic_under_seed(decoder):
    model, prompt = random_model(4), random_prompt(4)
    cfg = DecodeConfig(temperature=1.0, seed=17, max_new_tokens=12, block_size=4)
    a, sa = decoder(model, prompt, cfg)
    b, sb = decoder(model, prompt, cfg)
    assert a == b
    assert (sa.n_gen, sa.n_fwd, sa.forwards, sa.committed_per_forward) == \
        (sb.n_gen, sb.n_fwd, sb.forwards, sb.committed_per_forward)


def test_logical_distance_mode_runs():
    model, prompt = random_model(5), random_prompt(5)
    cfg = DecodeConfig(distance_mode="logical", max_new_tokens=12)
    tokens, stats = streaming_decode(model, prompt, cfg)
    assert stats.n_gen == len(tokens) > 0


# --- commit equivalence ---------------------------------------------------------------------

def _traced(seed, **kw):
    model, prompt = random_model(seed), random_prompt(seed, n=5)
    trace = DecodeTrace(prompt, model.config.mask_id)
    cfg = DecodeConfig(entropy_threshold=kw.pop("tau", 2.0), max_new_tokens=16, **kw)
    streaming_decode(model, prompt, cfg, trace)
    return model, trace


@pytest.mark.parametrize("seed", range(3))
def test_commit_equivalence_holds(seed):
    model, trace = _traced(seed)
    assert trace.committed
    assert commit_equivalence_check(model, trace)


def test_commit_equivalence_detects_corruption(monkeypatch):
    original = KvCache.extend
    state = {"done": False}

    def corrupt(self, delta):
        out = original(self, delta)
        if not state["done"] and len(out) > 5:
            values = list(out.values)
            values[0] = values[0].clone()
            values[0][:, 5] += 1e-2
            out = KvCache(out.keys, values, out.positions)
            state["done"] = True
        return out

    monkeypatch.setattr(KvCache, "extend", corrupt)
    model, trace = _traced(1)
    monkeypatch.setattr(KvCache, "extend", original)
    assert state["done"]
    assert not commit_equivalence_check(model, trace)


def test_commit_equivalence_empty_trace():
    model = random_model(0)
    assert commit_equivalence_check(model, DecodeTrace([1, 2], model.config.mask_id))


def test_trace_jsonl():
    stub = OracleStub()
    trace = DecodeTrace(PROMPT, stub.config.mask_id)
    streaming_decode(stub, PROMPT, DecodeConfig(window_size=2, entropy_threshold=10.0,
                                                max_new_tokens=4), trace)
    lines = [json.loads(x) for x in trace.to_jsonl().splitlines()]
    assert [r["iteration"] for r in lines] == list(range(len(trace.records)))
    assert lines[0]["window"][0] == {"state": "mask", "token": stub.config.mask_id, "position": 4}
    assert lines[1]["committed"] == 2


# --- invariants ------------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 500), W=st.integers(1, 8), tau=st.floats(0.0, 3.0),
       lam=st.floats(0.0, 1.0), n_new=st.integers(1, 20), temperature=st.sampled_from([0.0, 1.0]))
def test_streaming_invariants(seed, W, tau, lam, n_new, temperature):
    model, prompt = random_model(seed % 7), random_prompt(seed)
    trace = DecodeTrace(prompt, model.config.mask_id)
    cfg = DecodeConfig(window_size=W, entropy_threshold=tau, distance_penalty=lam,
                       max_new_tokens=n_new, temperature=temperature, seed=seed)
    tokens, stats = streaming_decode(model, prompt, cfg, trace)
    eos = model.config.eos_id
    # output completeness: contiguous logical positions, stops at the first EOS
    assert len(tokens) == stats.n_gen
    assert eos not in tokens[:-1]
    assert stats.n_gen == n_new or tokens[-1] == eos
    # accounting identity and bounds
    assert stats.n_fwd == sum(len(r.window) for r in trace.records)
    assert stats.forwards == len(trace.records) <= 2 * n_new + 1
    assert 0 < stats.n_gen <= stats.n_fwd
    done = set()
    for r in trace.records:
        filled = [f for f, _, _ in r.window]
        # filled slots form the physical prefix and are exactly what gets committed
        assert filled == sorted(filled, reverse=True)
        assert r.committed == sum(filled)
        assert len(r.window) <= W
        committed_eos = any(f and t == eos for f, t, _ in r.window)
        assert len(r.selected) >= 1 or r.committed == len(r.window) or committed_eos
        # positions are distinct; together with what is already committed they
        # cover a contiguous run starting right after the prompt
        pos = [p for _, _, p in r.window]
        assert len(set(pos)) == len(pos)
        assert not done & set(pos)
        covered = sorted(done | set(pos))
        assert covered == list(range(len(prompt) + 1, len(prompt) + 1 + len(covered)))
        done |= {p for f, _, p in r.window if f}
        for seg in ([p for f, _, p in r.window if f], [p for f, _, p in r.window if not f]):
            assert seg == sorted(seg)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 500), B=st.integers(1, 6), tau=st.floats(0.0, 3.0),
       n_new=st.integers(1, 16))
def test_blockwise_invariants(seed, B, tau, n_new):
    model, prompt = random_model(seed % 7), random_prompt(seed)
    trace = DecodeTrace(prompt, model.config.mask_id)
    cfg = DecodeConfig(block_size=B, entropy_threshold=tau, max_new_tokens=n_new)
    tokens, stats = blockwise_decode(model, prompt, cfg, trace)
    assert stats.n_gen == len(tokens)
    assert stats.forwards == len(trace.records)
    # n_fwd counts the open block's slots in each forward, carried slots excluded
    assert stats.n_fwd == sum(len(r.window) - r.committed for r in trace.records)
    assert stats.forwards <= n_new
    assert commit_equivalence_check(model, trace)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 500), n_new=st.integers(1, 16))
def test_ar_invariants(seed, n_new):
    model, prompt = random_model(seed % 7), random_prompt(seed)
    trace = DecodeTrace(prompt, model.config.mask_id)
    tokens, stats = ar_greedy_decode(model, prompt, DecodeConfig(max_new_tokens=n_new), trace)
    assert stats.n_fwd == stats.n_gen == stats.forwards == len(tokens)
    assert stats.p_cache == 1.0
    assert commit_equivalence_check(model, trace)


def test_eos_in_final_window_truncates():
    # the final window is emitted without a forward; EOS there still ends the output
    stub = EosStub(eos_at=5)
    cfg = DecodeConfig(window_size=4, entropy_threshold=10.0, max_new_tokens=4)
    tokens, stats = streaming_decode(stub, PROMPT, cfg)
    assert tokens == [stub.rule(4), stub.config.eos_id]
    assert stats.n_gen == 2
