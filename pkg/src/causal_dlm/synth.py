"""Synthetic corpora with controlled continuation entropy, and a char tokenizer.

* counting   -- consecutive zero-padded integers: continuation fully determined.
* arithmetic -- ``a+b=c;`` equations: operands random, sums determined.
* random     -- i.i.d. uniform tokens over the content vocabulary.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DecodingError, EncodingError

CHARSET = "0123456789 +=;" + string.ascii_lowercase + string.ascii_uppercase
RESERVED = 2  # end-of-sequence and mask ids sit at the top of the vocabulary
KINDS = ("counting", "arithmetic", "random")
CORPUS_HEADER = "#wedlm-corpus v1 vocab={}"


class CharTokenizer:
    """Bijection between the first ``vocab_size - 2`` characters of CHARSET and ids."""

    def __init__(self, vocab_size: int):
        if vocab_size < RESERVED + 1 or vocab_size - RESERVED > len(CHARSET):
            raise ConfigurationError(
                f"vocab_size must lie in [3, {len(CHARSET) + RESERVED}], got {vocab_size}"
            )
        self.vocab_size = vocab_size
        self.alphabet = CHARSET[:vocab_size - RESERVED]
        self._index = {c: i for i, c in enumerate(self.alphabet)}

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise EncodingError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int], skip_special: bool = False) -> str:
        out = []
        for i in ids:
            i = int(i)
            if 0 <= i < len(self.alphabet):
                out.append(self.alphabet[i])
            elif skip_special and i in (self.eos_id, self.mask_id):
                continue
            else:
                raise DecodingError(f"id {i} has no character (vocab_size={self.vocab_size})")
        return "".join(out)


@dataclass(frozen=True)
class CorpusSpec:
    kind: str
    vocab_size: int
    sequence_length: int
    num_sequences: int
    seed: int = 0
    start: int | None = None     # counting: first number (random per sequence if None)
    number_width: int = 3        # counting: zero-padded digit count
    max_operand: int = 49        # arithmetic: operands drawn from [0, max_operand]
    max_logical_position: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.sequence_length < 1 or self.num_sequences < 1:
            raise ConfigurationError("sequence_length and num_sequences must be positive")
        if self.max_logical_position is not None and self.sequence_length > self.max_logical_position:
            raise ConfigurationError("sequence_length exceeds max_logical_position")
        needed = {"counting": 11, "arithmetic": 14, "random": 1}[self.kind]
        if self.kind == "arithmetic" and self.vocab_size < 16:
            raise ConfigurationError("arithmetic corpora need vocab_size >= 16")
        if self.vocab_size - RESERVED < needed:
            raise ConfigurationError(f"{self.kind} corpora need vocab_size >= {needed + RESERVED}")
        CharTokenizer(self.vocab_size)
        if self.number_width < 1 or self.max_operand < 0:
            raise ConfigurationError("number_width must be >= 1 and max_operand >= 0")
        if self.start is not None and not 0 <= self.start < 10 ** self.number_width:
            raise ConfigurationError("start does not fit in number_width digits")


def counting_text(start: int, length: int, width: int) -> str:
    parts, n = [], start
    total = 0
    while total < length:
        parts.append(f"{n % 10 ** width:0{width}d} ")
        total += width + 1
        n += 1
    return "".join(parts)[:length]


def arithmetic_text(rng: np.random.Generator, length: int, max_operand: int) -> str:
    parts, total = [], 0
    while total < length:
        a, b = (int(v) for v in rng.integers(0, max_operand + 1, size=2))
        eq = f"{a}+{b}={a + b};"
        parts.append(eq)
        total += len(eq)
    return "".join(parts)[:length]


def generate(spec: CorpusSpec) -> list[list[int]]:
    """Deterministic corpus of ``num_sequences`` id sequences of ``sequence_length``."""
    rng = np.random.default_rng(spec.seed)
    tok = CharTokenizer(spec.vocab_size)
    L = spec.sequence_length
    out = []
    if spec.kind == "random":
        data = rng.integers(0, spec.vocab_size - RESERVED, size=(spec.num_sequences, L))
        return [[int(v) for v in row] for row in data]
    for _ in range(spec.num_sequences):
        if spec.kind == "counting":
            count = -(-L // (spec.number_width + 1))
            if spec.start is not None:
                start = spec.start
            else:
                start = int(rng.integers(0, max(1, 10 ** spec.number_width - count)))
            text = counting_text(start, L, spec.number_width)
        else:
            text = arithmetic_text(rng, L, spec.max_operand)
        out.append(tok.encode(text))
    return out


def check_arithmetic(text: str) -> tuple[int, int]:
    """(complete equations, correct equations) found in ``text``."""
    total = correct = 0
    for chunk in text.split(";")[:-1]:
        if "+" not in chunk or "=" not in chunk:
            continue
        lhs, _, rhs = chunk.partition("=")
        a, _, b = lhs.partition("+")
        if not (a.isdigit() and b.isdigit() and rhs.isdigit()):
            continue
        total += 1
        correct += int(a) + int(b) == int(rhs)
    return total, correct


def write_corpus(path, corpus: Sequence[Sequence[int]], vocab_size: int) -> None:
    lines = [CORPUS_HEADER.format(vocab_size)]
    lines.extend(" ".join(str(int(t)) for t in seq) for seq in corpus)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path) -> tuple[int, list[list[int]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#wedlm-corpus v1 vocab="):
        raise ValueError(f"{path}: missing '#wedlm-corpus v1 vocab=<V>' header")
    vocab = int(lines[0].split("vocab=", 1)[1])
    corpus = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        ids = [int(t) for t in line.split()]
        if any(not 0 <= t < vocab for t in ids):
            raise ValueError(f"{path}:{lineno}: token id outside vocab {vocab}")
        corpus.append(ids)
    return vocab, corpus
