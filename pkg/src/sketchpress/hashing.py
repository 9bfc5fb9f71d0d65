"""Seeded 64-bit hash family used to bind weight addresses to sketch columns.

Every row of a sketch owns one seed. An address is mixed with that seed
through the SplitMix64 finalizer and reduced to ``[0, columns)`` with a
multiply-shift on the high 32 bits, so nothing about the mapping has to be
stored: the address itself is the index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_ROW_CONSTANT = 0xD1B54A32D192ED03

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z = x & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorized :func:`mix64` over a ``uint64`` array (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(master: int, salt: int) -> int:
    """Derive an independent 64-bit seed from ``master`` and an integer salt."""
    return mix64((master & MASK64) ^ mix64(salt * GOLDEN_GAMMA + 1))


def row_seed(master: int, row: int) -> int:
    return mix64((master & MASK64) ^ ((row + 1) * _ROW_CONSTANT & MASK64))


@dataclass(frozen=True)
class HashFamily:
    """One seed per sketch row; ``identity`` switches to ``addr % columns``."""

    seeds: tuple[int, ...]
    identity: bool = False

    @classmethod
    def from_master(cls, master: int, rows: int, identity: bool = False) -> "HashFamily":
        if rows < 1:
            raise ValueError(f"rows must be >= 1, got {rows}")
        seeds = tuple(row_seed(master, r) for r in range(rows))
        if len(set(seeds)) != rows:  # pragma: no cover - 2^-64 event
            raise ValueError("row seeds collided; pick another master seed")
        return cls(seeds, identity)

    @property
    def rows(self) -> int:
        return len(self.seeds)

    def index(self, row: int, addr: int, columns: int) -> int:
        """Column for a single address in ``row``."""
        if not 0 <= row < self.rows:
            raise IndexError(f"row {row} out of range for {self.rows} rows")
        if columns < 1:
            raise ValueError(f"columns must be >= 1, got {columns}")
        if addr < 0:
            raise ValueError(f"address must be non-negative, got {addr}")
        if self.identity:
            return addr % columns
        h = mix64((addr * GOLDEN_GAMMA + self.seeds[row]) & MASK64)
        return ((h >> 32) * columns) >> 32

    def indices(self, row: int, addrs: np.ndarray, columns: int) -> np.ndarray:
        """Vectorized :meth:`index`; returns ``int64`` columns."""
        if not 0 <= row < self.rows:
            raise IndexError(f"row {row} out of range for {self.rows} rows")
        if not 1 <= columns < 2**32:
            raise ValueError(f"columns must be in [1, 2^32), got {columns}")
        a = np.asarray(addrs, dtype=np.uint64)
        if self.identity:
            return (a % np.uint64(columns)).astype(np.int64)
        with np.errstate(over="ignore"):
            z = a * np.uint64(GOLDEN_GAMMA) + np.uint64(self.seeds[row])
        h = mix64_array(z)
        return (((h >> np.uint64(32)) * np.uint64(columns)) >> np.uint64(32)).astype(np.int64)

    def all_indices(self, addrs: np.ndarray, columns: int) -> np.ndarray:
        """``rows x len(addrs)`` matrix of bonded columns."""
        return np.stack([self.indices(r, addrs, columns) for r in range(self.rows)])
