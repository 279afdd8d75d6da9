"""Deterministic, parallelism-independent random streams.

Every stream is identified by the tuple (master_seed, level, sample_index,
replica_tag).  The tuple is hashed into a Philox counter-based generator key,
so any stream can be constructed in any order, on any thread, and always
produces the same byte sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ParameterError(ValueError):
    """Invalid argument to a sampling routine."""


@dataclass
class SeedStream:
    master_seed: int
    level: int
    sample_index: int
    replica_tag: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.master_seed < 0 or self.level < 0 or self.sample_index < 0 or self.replica_tag < 0:
            raise ParameterError("stream identifiers must be non-negative")
        # The master seed is the 128-bit Philox key and the (level, sample,
        # replica) tuple seeds the high counter words, so distinct tuples give
        # non-overlapping random-access streams (2^64 draws of room each) with
        # no sequential seeding state.
        key = np.zeros(2, dtype=np.uint64)
        key[0] = np.uint64(self.master_seed)
        counter = np.zeros(4, dtype=np.uint64)
        counter[1] = np.uint64(self.level)
        counter[2] = np.uint64(self.sample_index)
        counter[3] = np.uint64(self.replica_tag)
        self._gen = np.random.Generator(np.random.Philox(key=key, counter=counter))

    def bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)

    def standard_normal(self, *shape: int) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, lo: float, hi: float, count: int = 1) -> np.ndarray:
        if not lo < hi:
            raise ParameterError(f"uniform bounds require lo < hi, got [{lo}, {hi}]")
        return self._gen.uniform(lo, hi, size=count)

    def integers(self, high: int, count: int) -> np.ndarray:
        return self._gen.integers(0, high, size=count)


def derive_stream(master_seed: int, level: int, sample_index: int, replica_tag: int = 0) -> SeedStream:
    """Construct the random stream for one (level, sample, replica) triple."""
    return SeedStream(master_seed, level, sample_index, replica_tag)


def draw(stream: SeedStream, kind: str, count: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Draw `count` variates of the given kind from a stream.

    kind is "standard_normal" or "uniform"; uniform uses bounds (lo, hi).
    """
    if count < 0:
        raise ParameterError("count must be non-negative")
    if count == 0:
        return np.empty(0)
    if kind == "standard_normal":
        return stream.standard_normal(count)
    if kind == "uniform":
        return stream.uniform(lo, hi, count)
    raise ParameterError(f"unknown draw kind {kind!r}")
