"""Synthetic sequence-to-sequence corpora with controllable length skew.

Two tasks: PREFIX_COPY (target = first l source tokens) isolates pure length
control; MARKED_EXTRACT (target = first l content tokens that follow marker
tokens) adds a content-selection axis so ROUGE is informative.

Reference lengths l follow a truncated normal, which reproduces the
"long targets are rare" skew that makes out-of-distribution length requests
a real generalization test.

Token id convention (recorded in the corpus file header):
0 = pad, 1 = begin, 2 = end-of-sequence, 3 = marker, content ids from 4.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

__all__ = [
    "PAD_ID",
    "BEGIN_ID",
    "EOS_ID",
    "MARKER_ID",
    "FIRST_CONTENT_ID",
    "Task",
    "LengthDistribution",
    "CorpusSpec",
    "TrainingExample",
    "generate_corpus",
    "write_corpus",
    "read_corpus",
    "split_corpus",
]

PAD_ID = 0
BEGIN_ID = 1
EOS_ID = 2
MARKER_ID = 3
FIRST_CONTENT_ID = 4

_REDRAW_LIMIT = 20


class Task(enum.Enum):
    PREFIX_COPY = "prefix_copy"
    MARKED_EXTRACT = "marked_extract"


@dataclass(frozen=True)
class LengthDistribution:
    """Truncated normal over integer target lengths, bounds inclusive."""

    mean: float
    sd: float
    min: int
    max: int

    def __post_init__(self):
        if self.min < 1 or self.max < self.min:
            raise ValueError(f"need 1 <= min <= max, got [{self.min}, {self.max}]")
        if self.sd < 0:
            raise ValueError(f"sd must be >= 0, got {self.sd}")

    def draw(self, rng: np.random.Generator) -> int:
        for _ in range(1000):
            l = int(round(rng.normal(self.mean, self.sd)))
            if self.min <= l <= self.max:
                return l
        raise ValueError(
            f"could not draw a length in [{self.min}, {self.max}] "
            f"from N({self.mean}, {self.sd}); bounds too far in the tail"
        )


@dataclass(frozen=True)
class CorpusSpec:
    task: Task
    vocab_size: int
    n_examples: int
    source_len_range: tuple[int, int]
    lengths: LengthDistribution
    rng_seed: int = 0

    def __post_init__(self):
        if self.vocab_size <= FIRST_CONTENT_ID:
            raise ValueError(f"vocab_size must exceed {FIRST_CONTENT_ID} (reserved ids)")
        lo, hi = self.source_len_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad source_len_range {self.source_len_range}")
        if self.n_examples < 0:
            raise ValueError("n_examples must be >= 0")
        if self.task is Task.PREFIX_COPY and self.lengths.max > lo:
            raise ValueError(
                f"prefix-copy targets must be realizable: length max {self.lengths.max} "
                f"> source length min {lo}"
            )


@dataclass
class TrainingExample:
    """One seq2seq pair; target carries a trailing EOS and l content tokens."""

    source: list[int]
    target: list[int]
    l: int

    def validate(self) -> "TrainingExample":
        if self.l < 1:
            raise ValueError(f"target length must be >= 1, got {self.l}")
        if len(self.target) != self.l + 1:
            raise ValueError(f"l={self.l} inconsistent with target of {len(self.target)} tokens")
        if self.target[-1] != EOS_ID:
            raise ValueError("target must end with the end-of-sequence token")
        return self


def _example_rng(seed: int, index: int) -> np.random.Generator:
    # per-example stream so generation is order-independent and parallelizable
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, index)))


def _draw_prefix_copy(spec: CorpusSpec, rng: np.random.Generator) -> TrainingExample:
    lo, hi = spec.source_len_range
    n = int(rng.integers(lo, hi + 1))
    l = spec.lengths.draw(rng)
    source = rng.integers(FIRST_CONTENT_ID, spec.vocab_size, size=n).tolist()
    return TrainingExample(source=source, target=source[:l] + [EOS_ID], l=l)


def _draw_marked_extract(spec: CorpusSpec, rng: np.random.Generator) -> TrainingExample:
    lo, hi = spec.source_len_range
    l = spec.lengths.draw(rng)
    for _ in range(_REDRAW_LIMIT):
        n = int(rng.integers(lo, hi + 1))
        source: list[int] = []
        marked: list[int] = []
        while len(source) < n:
            tok = int(rng.integers(FIRST_CONTENT_ID, spec.vocab_size))
            if len(source) <= n - 2 and rng.random() < 0.5:
                source.extend([MARKER_ID, tok])
                marked.append(tok)
            else:
                source.append(tok)
        if len(marked) >= l:
            return TrainingExample(source=source, target=marked[:l] + [EOS_ID], l=l)
    raise ValueError(
        f"could not realize a marked-extract target of {l} tokens from sources of "
        f"length {spec.source_len_range} after {_REDRAW_LIMIT} redraws"
    )


def generate_corpus(spec: CorpusSpec) -> Iterator[TrainingExample]:
    """Yield spec.n_examples examples, deterministic in (rng_seed, index)."""
    draw = _draw_prefix_copy if spec.task is Task.PREFIX_COPY else _draw_marked_extract
    for i in range(spec.n_examples):
        yield draw(spec, _example_rng(spec.rng_seed, i)).validate()


def corpus_header(spec: CorpusSpec) -> list[str]:
    return [
        f"# lenctl corpus task={spec.task.value} vocab_size={spec.vocab_size} "
        f"n={spec.n_examples} seed={spec.rng_seed}",
        f"# reserved ids: pad={PAD_ID} begin={BEGIN_ID} end={EOS_ID} marker={MARKER_ID} "
        f"content>={FIRST_CONTENT_ID}",
    ]


def write_corpus(examples: Iterable[TrainingExample], path, header: list[str] | None = None) -> int:
    """Write line-delimited records; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for line in header or []:
            f.write(line.rstrip("\n") + "\n")
        for ex in examples:
            f.write(json.dumps({"source": ex.source, "target": ex.target, "l": ex.l},
                               separators=(",", ":")) + "\n")
            n += 1
    return n


def read_corpus(path) -> list[TrainingExample]:
    """Parse a corpus file; `#` comment lines and blank lines are skipped.

    Malformed lines and inconsistent records are rejected with the offending
    line number. An empty file is an empty corpus, not an error.
    """
    out: list[TrainingExample] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
                ex = TrainingExample(
                    source=[int(t) for t in rec["source"]],
                    target=[int(t) for t in rec["target"]],
                    l=int(rec["l"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}: line {lineno}: malformed corpus record ({e})") from e
            try:
                ex.validate()
            except ValueError as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from e
            out.append(ex)
    return out


def split_corpus(
    examples: list[TrainingExample], n_train: int, n_val: int = 0, n_test: int = 0
) -> tuple[list[TrainingExample], list[TrainingExample], list[TrainingExample]]:
    """Disjoint contiguous splits by example index, sizes exact."""
    need = n_train + n_val + n_test
    if need > len(examples):
        raise ValueError(f"splits need {need} examples, corpus has {len(examples)}")
    train = examples[:n_train]
    val = examples[n_train : n_train + n_val]
    test = examples[n_train + n_val : need]
    return train, val, test
