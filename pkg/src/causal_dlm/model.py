"""Minimal decoder-only transformer driven by explicit logical position ids.

Tokens are processed in *physical* order (which controls what each query may
attend to) while rotary embeddings are computed from the supplied *logical*
positions. Attention visibility is either plain causal or an arbitrary
per-query allow-list, and keys/values can be carried across calls in a
:class:`KvCache`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, NumericError, PositionRangeError


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    head_dim: int
    vocab_size: int
    rope_base: float = 10000.0
    max_logical_position: int = 512

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "head_dim", "vocab_size", "max_logical_position"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(f"{name} must be a positive int, got {value!r}")
        if self.head_dim % 2:
            raise ConfigurationError(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        if self.vocab_size < 4:
            raise ConfigurationError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if not (self.rope_base > 0 and math.isfinite(self.rope_base)):
            raise ConfigurationError(f"rope_base must be positive, got {self.rope_base!r}")

    @property
    def d_model(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 2

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class VisibilitySpec:
    """Which physical indices each query of a forward batch may attend to.

    Row ``i`` describes the query at physical index ``cache_len + i``. A query
    always attends to itself; the allow-list names the *other* indices it may
    see, all of which must be physically earlier. ``VisibilitySpec.causal()``
    is the fast path used by decoding.
    """

    __slots__ = ("is_causal", "_matrix")

    def __init__(self, matrix: np.ndarray | None = None):
        self.is_causal = matrix is None
        if matrix is not None:
            matrix = np.array(matrix, dtype=bool)
            if matrix.ndim != 2:
                raise ContractError("visibility matrix must be 2-D (queries x keys)")
            matrix.setflags(write=False)
        self._matrix = matrix

    @classmethod
    def causal(cls) -> "VisibilitySpec":
        return cls(None)

    @classmethod
    def from_lists(cls, allowed: Sequence[Sequence[int]], cache_len: int = 0) -> "VisibilitySpec":
        n = len(allowed)
        matrix = np.zeros((n, cache_len + n), dtype=bool)
        for i, keys in enumerate(allowed):
            for j in keys:
                if j < 0 or j >= cache_len + n:
                    raise ContractError(f"query {cache_len + i} references out-of-range index {j}")
                matrix[i, j] = True
        return cls(matrix)

    def allowed(self, row: int, cache_len: int = 0) -> list[int]:
        """Indices (other than itself) visible to query ``row``."""
        me = cache_len + row
        if self.is_causal:
            return list(range(me))
        return [int(j) for j in np.flatnonzero(self._matrix[row]) if j != me]

    def to_mask(self, cache_len: int, n: int) -> np.ndarray:
        """Boolean ``(n, cache_len + n)`` attention mask, self-attention included."""
        if self.is_causal:
            return np.tril(np.ones((n, cache_len + n), dtype=bool), k=cache_len)
        m = self._matrix
        if m.shape != (n, cache_len + n):
            raise ContractError(
                f"visibility covers {m.shape}, batch needs ({n}, {cache_len + n})"
            )
        future = np.triu(np.ones_like(m), k=cache_len + 1)
        if np.any(m & future):
            row, col = np.argwhere(m & future)[0]
            raise ContractError(
                f"query at physical index {cache_len + row} may not see future index {col}"
            )
        mask = m.copy()
        mask[np.arange(n), cache_len + np.arange(n)] = True
        return mask


@dataclass(frozen=True)
class ForwardBatch:
    tokens: Sequence[int]
    positions: Sequence[int]
    visibility: VisibilitySpec = field(default_factory=VisibilitySpec.causal)

    def __post_init__(self):
        if len(self.tokens) != len(self.positions):
            raise ContractError(
                f"tokens ({len(self.tokens)}) and positions ({len(self.positions)}) differ in length"
            )


class KvCache:
    """Committed keys/values in physical (commit) order, one stack per layer.

    Keys are stored after rotary rotation. ``extend`` returns a new cache and
    leaves this one untouched.
    """

    __slots__ = ("keys", "values", "positions")

    def __init__(self, keys: Sequence[torch.Tensor], values: Sequence[torch.Tensor],
                 positions: torch.Tensor):
        if len(keys) != len(values):
            raise ContractError("keys and values must cover the same layers")
        n = positions.shape[0]
        for k, v in zip(keys, values):
            if k.shape[1] != n or v.shape[1] != n:
                raise ContractError("every layer must hold one entry per position")
        self.keys = tuple(keys)
        self.values = tuple(values)
        self.positions = positions

    @classmethod
    def empty(cls, num_layers: int, num_heads: int, head_dim: int,
              dtype: torch.dtype = torch.float32) -> "KvCache":
        blank = torch.zeros(num_heads, 0, head_dim, dtype=dtype)
        return cls([blank] * num_layers, [blank] * num_layers, torch.zeros(0, dtype=torch.long))

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @property
    def num_layers(self) -> int:
        return len(self.keys)

    def extend(self, delta: "KvCache") -> "KvCache":
        if delta.num_layers != self.num_layers:
            raise ContractError("cache delta has a different layer count")
        return KvCache(
            [torch.cat([a, b], dim=1) for a, b in zip(self.keys, delta.keys)],
            [torch.cat([a, b], dim=1) for a, b in zip(self.values, delta.values)],
            torch.cat([self.positions, delta.positions]),
        )

    def select(self, indices: Sequence[int]) -> "KvCache":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return KvCache(
            [k.index_select(1, idx) for k in self.keys],
            [v.index_select(1, idx) for v in self.values],
            self.positions.index_select(0, idx),
        )

    def entries(self, layer: int) -> list[tuple[torch.Tensor, torch.Tensor, int]]:
        k, v = self.keys[layer], self.values[layer]
        return [(k[:, i], v[:, i], int(p)) for i, p in enumerate(self.positions)]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V = config.d_model, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, d)}
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "w1"] = (d, 4 * d)
        shapes[p + "w2"] = (4 * d, d)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, V)
    return shapes


class Parameters:
    """Weights of one model; treat as read-only once built."""

    __slots__ = ("config", "tensors")

    def __init__(self, config: ModelConfig, tensors: Mapping[str, torch.Tensor]):
        expected = parameter_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigurationError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ConfigurationError(
                    f"{name} has shape {tuple(tensors[name].shape)}, expected {shape}"
                )
        self.config = config
        self.tensors = MappingProxyType({name: tensors[name] for name in expected})

    @property
    def dtype(self) -> torch.dtype:
        return self.tensors["embed"].dtype

    def to(self, dtype: torch.dtype) -> "Parameters":
        return Parameters(self.config, {n: t.detach().to(dtype) for n, t in self.tensors.items()})

    def empty_cache(self) -> KvCache:
        c = self.config
        return KvCache.empty(c.num_layers, c.num_heads, c.head_dim, dtype=self.dtype)

    def forward(self, batch: ForwardBatch, cache: KvCache | None = None):
        return forward(self, batch, cache)

    def equal(self, other: "Parameters") -> bool:
        return self.config == other.config and all(
            torch.equal(self.tensors[n], other.tensors[n]) for n in self.tensors
        )


def init_params(config: ModelConfig, seed: int) -> Parameters:
    """Zero-mean normal init scaled by fan-in; residual outputs shrunk by depth."""
    gen = torch.Generator().manual_seed(int(seed))
    residual_scale = 1.0 / math.sqrt(2 * config.num_layers)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm"):
            tensors[name] = torch.ones(shape)
            continue
        fan_in = shape[1] if name == "embed" else shape[0]
        std = 1.0 / math.sqrt(fan_in)
        if name.endswith(("wo", "w2")):
            std *= residual_scale
        tensors[name] = torch.randn(shape, generator=gen) * std
    return Parameters(config, tensors)


def _rms_norm(x: torch.Tensor, weight: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * weight


def rotary_tables(positions: torch.Tensor, head_dim: int, base: float, dtype: torch.dtype):
    """cos/sin tables of shape ``positions.shape + (head_dim // 2,)``."""
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = positions.to(torch.float64).unsqueeze(-1) * inv_freq
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (N, H, T, D); cos/sin: (N, T, D/2)
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    cos, sin = cos.unsqueeze(1), sin.unsqueeze(1)
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def forward_tensors(tensors: Mapping[str, torch.Tensor], config: ModelConfig,
                    tokens: torch.Tensor, positions: torch.Tensor, mask: torch.Tensor,
                    past: Sequence[tuple[torch.Tensor, torch.Tensor]] | None = None):
    """Batched core forward.

    tokens/positions: (N, T) long. mask: (N, T, S) bool with S = past + T.
    past: per-layer (keys, values) of shape (N, H, P, D), already rotated.
    Returns logits (N, T, V) and per-layer (keys, values) for the T new tokens.
    """
    N, T = tokens.shape
    H, D = config.num_heads, config.head_dim
    x = tensors["embed"][tokens]
    cos, sin = rotary_tables(positions, D, config.rope_base, x.dtype)
    attn_mask = mask.unsqueeze(1)
    scale = 1.0 / math.sqrt(D)
    new_kv = []
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        h = _rms_norm(x, tensors[p + "attn_norm"])
        q = (h @ tensors[p + "wq"]).view(N, T, H, D).transpose(1, 2)
        k = (h @ tensors[p + "wk"]).view(N, T, H, D).transpose(1, 2)
        v = (h @ tensors[p + "wv"]).view(N, T, H, D).transpose(1, 2)
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)
        new_kv.append((k, v))
        if past is not None:
            k = torch.cat([past[layer][0], k], dim=2)
            v = torch.cat([past[layer][1], v], dim=2)
        scores = (q @ k.transpose(-1, -2)) * scale
        scores = scores.masked_fill(~attn_mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1) @ v
        x = x + attn.transpose(1, 2).reshape(N, T, H * D) @ tensors[p + "wo"]
        h = _rms_norm(x, tensors[p + "ffn_norm"])
        x = x + F.gelu(h @ tensors[p + "w1"]) @ tensors[p + "w2"]
    logits = _rms_norm(x, tensors["final_norm"]) @ tensors["lm_head"]
    return logits, new_kv


def forward(params: Parameters, batch: ForwardBatch, cache: KvCache | None = None):
    """Run one batch against a cache.

    Returns ``(logits, cache_delta)``: logits has one row per input token and
    ``cache_delta`` holds the new (rotated) keys/values for every input token,
    tagged with their logical positions. The caller decides what to commit.
    """
    config = params.config
    if cache is None:
        cache = params.empty_cache()
    if cache.num_layers != config.num_layers:
        raise ContractError("cache layer count does not match the model")
    n = len(batch.tokens)
    if n == 0:
        raise ContractError("forward batch is empty")
    tokens = torch.as_tensor(list(batch.tokens), dtype=torch.long)
    positions = torch.as_tensor(list(batch.positions), dtype=torch.long)
    if int(tokens.min()) < 0 or int(tokens.max()) >= config.vocab_size:
        raise ContractError("token id outside the vocabulary")
    if int(positions.min()) < 0 or int(positions.max()) > config.max_logical_position:
        raise PositionRangeError(
            f"logical positions must lie in [0, {config.max_logical_position}]"
        )
    mask = torch.from_numpy(batch.visibility.to_mask(len(cache), n))
    past = None
    if len(cache):
        past = [(k.unsqueeze(0), v.unsqueeze(0)) for k, v in zip(cache.keys, cache.values)]
    logits, new_kv = forward_tensors(
        params.tensors, config, tokens.unsqueeze(0), positions.unsqueeze(0),
        mask.unsqueeze(0), past,
    )
    delta = KvCache([k[0] for k, _ in new_kv], [v[0] for _, v in new_kv], positions)
    return logits[0], delta


def _as_float_array(logits) -> np.ndarray:
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().to(torch.float64).cpu().numpy()
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("logits contain non-finite values")
    return arr


def entropies(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax entropy in nats for a (rows, vocab) array."""
    if not temperature > 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    z = _as_float_array(logits) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    h = -(np.exp(logp) * logp).sum(axis=-1)
    return np.maximum(h, 0.0)


def softmax_entropy(logit_row, temperature: float = 1.0) -> float:
    return float(entropies(np.atleast_2d(_as_float_array(logit_row)), temperature)[0])


def sample_token(logit_row, temperature: float, rng: np.random.Generator) -> int:
    """Greedy at temperature 0 (ties to the smallest id), else a categorical draw."""
    row = _as_float_array(logit_row).reshape(-1)
    if temperature <= 0:
        return int(np.argmax(row))
    z = row / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(row.shape[0], p=p))
