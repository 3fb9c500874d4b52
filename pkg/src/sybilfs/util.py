"""Shared plumbing: seeded RNG derivation, virtual clock, opaque-token source.

Every stochastic component derives its own random.Random from (seed, label)
so that runs are reproducible and components can be reordered without
perturbing each other's streams.
"""

from __future__ import annotations

import hashlib
import random

BLOCK_SIZE = 4096


def derive_seed(seed: int, label: str) -> int:
    h = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def derive_rng(seed: int, label: str) -> random.Random:
    return random.Random(derive_seed(seed, label))


def digest16(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=16).digest()


class SimClock:
    """Monotonic virtual clock in integer microseconds."""

    def __init__(self, start: int = 0):
        self._now = start

    @property
    def now(self) -> int:
        return self._now

    def advance_to(self, t: int) -> None:
        if t < self._now:
            raise ValueError(f"clock moving backwards: {t} < {self._now}")
        self._now = t

    def advance_by(self, dt: int) -> None:
        self.advance_to(self._now + dt)


class TokenSource:
    """Issues single-use 64-bit opaque references for filedata buffers.

    Tokens are never reused; consumers may call `retire` to assert
    single use.
    """

    def __init__(self, rng: random.Random):
        self._rng = rng
        self._issued: set[int] = set()
        self._retired: set[int] = set()

    def issue(self) -> int:
        while True:
            tok = self._rng.getrandbits(64)
            if tok not in self._issued:
                self._issued.add(tok)
                return tok

    def retire(self, tok: int) -> None:
        if tok not in self._issued:
            raise ValueError(f"unknown opaque reference {tok:#x}")
        if tok in self._retired:
            raise ValueError(f"opaque reference reused: {tok:#x}")
        self._retired.add(tok)


def pattern_bytes(tag: bytes, size: int) -> bytes:
    """Deterministic filler content: a 32-byte digest tiled to `size`."""
    if size <= 0:
        return b""
    unit = hashlib.blake2b(tag, digest_size=32).digest()
    reps = size // len(unit) + 1
    return (unit * reps)[:size]
