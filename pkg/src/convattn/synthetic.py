"""Synthetic corpora where a masked token is recoverable only through a neighbour's position."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("copy-prev", "copy-next", "direction-mixed")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "copy-prev"
    vocab_size: int = 50
    length: int = 16
    count: int = 5000
    seed: int = 0
    mapping_seed: int = 0  # fixes the successor map; keep equal across train/eval sets

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown synthetic task kind {self.kind!r}; expected one of {KINDS}")
        if self.vocab_size < 2 or self.length < 1 or self.count < 0:
            raise ValueError("vocab_size >= 2, length >= 1 and count >= 0 required")


def token_names(vocab_size: int) -> list[str]:
    width = len(str(vocab_size - 1))
    return [f"t{i:0{width}d}" for i in range(vocab_size)]


def successor_map(vocab_size: int, mapping_seed: int, salt: int = 0) -> np.ndarray:
    """A fixed random permutation with no fixed points (a token never maps to itself)."""
    rng = np.random.default_rng([mapping_seed, salt])
    while True:
        perm = rng.permutation(vocab_size)
        if not np.any(perm == np.arange(vocab_size)):
            return perm


def generate_ids(spec: SyntheticTaskSpec) -> np.ndarray:
    """``(count, length)`` token ids.

    copy-prev: ``x[t] = f(x[t-1])``; copy-next: ``x[t] = g(x[t+1])``;
    direction-mixed: each line independently picks one of the two.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    fwd = successor_map(spec.vocab_size, spec.mapping_seed, 0)
    bwd = successor_map(spec.vocab_size, spec.mapping_seed, 1)
    out = np.empty((spec.count, spec.length), dtype=np.int64)
    starts = rng.integers(0, spec.vocab_size, size=spec.count)
    if spec.kind == "copy-prev":
        backwards = np.zeros(spec.count, dtype=bool)
    elif spec.kind == "copy-next":
        backwards = np.ones(spec.count, dtype=bool)
    else:
        backwards = rng.random(spec.count) < 0.5
    for r in range(spec.count):
        seq = np.empty(spec.length, dtype=np.int64)
        if backwards[r]:
            seq[-1] = starts[r]
            for t in range(spec.length - 2, -1, -1):
                seq[t] = bwd[seq[t + 1]]
        else:
            seq[0] = starts[r]
            for t in range(1, spec.length):
                seq[t] = fwd[seq[t - 1]]
        out[r] = seq
    return out


def generate(spec: SyntheticTaskSpec) -> list[str]:
    """Corpus lines (space-separated token names) for ``spec``."""
    names = token_names(spec.vocab_size)
    return [" ".join(names[i] for i in row) for row in generate_ids(spec)]


def write_corpus(path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
