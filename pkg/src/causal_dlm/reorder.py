"""Observed-before-mask reordering of a partially masked sequence, and its inverse.

Placing every observed token physically ahead of every mask token means a
plain causal mask already lets each mask slot see the whole observed set.
Logical positions travel with their tokens so rotary encoding is unaffected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ContractError


@dataclass(frozen=True)
class MaskedSequence:
    tokens: tuple[int, ...]
    positions: tuple[int, ...]
    mask_flags: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))
        object.__setattr__(self, "mask_flags", tuple(bool(m) for m in self.mask_flags))
        if not len(self.tokens) == len(self.positions) == len(self.mask_flags):
            raise ContractError("tokens, positions and mask_flags must have equal length")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ContractError("positions must be strictly increasing")

    @classmethod
    def from_mask_positions(cls, tokens: Sequence[int], positions: Sequence[int],
                            masked: set[int] | Sequence[int], mask_id: int) -> "MaskedSequence":
        """Mask the entries whose *logical position* is in ``masked``."""
        masked = set(masked)
        flags = [p in masked for p in positions]
        toks = [mask_id if f else t for t, f in zip(tokens, flags)]
        return cls(tuple(toks), tuple(positions), tuple(flags))

    @property
    def num_masked(self) -> int:
        return sum(self.mask_flags)

    @property
    def num_observed(self) -> int:
        return len(self.tokens) - self.num_masked


@dataclass(frozen=True)
class ReorderedSequence:
    tokens: tuple[int, ...]
    positions: tuple[int, ...]
    permutation: tuple[int, ...]  # physical index -> original index
    num_observed: int

    @property
    def mask_flags(self) -> tuple[bool, ...]:
        return tuple(i >= self.num_observed for i in range(len(self.tokens)))


def topological_reorder(seq: MaskedSequence) -> ReorderedSequence:
    observed = [i for i, m in enumerate(seq.mask_flags) if not m]
    masked = [i for i, m in enumerate(seq.mask_flags) if m]
    # positions are strictly increasing, so original index order is logical order
    perm = tuple(observed + masked)
    return ReorderedSequence(
        tokens=tuple(seq.tokens[i] for i in perm),
        positions=tuple(seq.positions[i] for i in perm),
        permutation=perm,
        num_observed=len(observed),
    )


def restore_order(reordered: ReorderedSequence, values: Sequence) -> list:
    """Put per-physical-index payloads back into original (logical) order."""
    if len(values) != len(reordered.permutation):
        raise ContractError(
            f"expected {len(reordered.permutation)} payloads, got {len(values)}"
        )
    out = [None] * len(values)
    for physical, original in enumerate(reordered.permutation):
        out[original] = values[physical]
    return out
