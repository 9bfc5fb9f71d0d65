"""Multi-row sketch state with AbsMaxMin, AbsMinMax and CountMin rules.

A compression unit (a tensor row or a whole tensor) is flattened row-major and
each weight is addressed by its position. Every sketch row hashes the address
to one column; the variant decides what the cell keeps on update and how the
bonded cells are combined on retrieval:

=========  ==========================  ====================================
variant    update (per cell)           retrieve (across rows)
=========  ==========================  ====================================
AbsMaxMin  keep smaller ``|w|``        signed value with the largest ``|.|``
AbsMinMax  keep larger ``|w|``         signed value with the smallest ``|.|``
CountMin   add ``w``                   signed value with the smallest ``|.|``
=========  ==========================  ====================================

Ties between equal magnitudes resolve towards the non-negative value, and at
retrieval towards the lower row, so every reduction is order independent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .hashing import HashFamily

__all__ = [
    "Variant",
    "SketchConfig",
    "SketchState",
    "empty_state",
    "hash_index",
    "update",
    "retrieve",
    "compress_unit",
    "decompress_unit",
    "selected_rows",
]

_ABS_MASK = np.uint32(0x7FFFFFFF)


class Variant(enum.Enum):
    ABS_MAX_MIN = "absmaxmin"
    ABS_MIN_MAX = "absminmax"
    COUNT_MIN = "countmin"

    @property
    def code(self) -> int:
        return _VARIANT_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Variant":
        for v, c in _VARIANT_CODES.items():
            if c == code:
                return v
        raise ValueError(f"unknown variant code {code}")


_VARIANT_CODES = {Variant.ABS_MAX_MIN: 0, Variant.ABS_MIN_MAX: 1, Variant.COUNT_MIN: 2}


@dataclass(frozen=True)
class SketchConfig:
    columns: int
    rows: int = 3
    variant: Variant = Variant.ABS_MAX_MIN
    seed: int = 0
    test_hash: bool = False

    def __post_init__(self) -> None:
        if self.rows < 1:
            raise ValueError(f"rows must be >= 1, got {self.rows}")
        if self.columns < 1:
            raise ValueError(f"columns must be >= 1, got {self.columns}")
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", Variant(self.variant))

    @cached_property
    def family(self) -> HashFamily:
        return HashFamily.from_master(self.seed, self.rows, identity=self.test_hash)

    @property
    def size(self) -> int:
        """Number of state elements (rows x columns)."""
        return self.rows * self.columns


@dataclass(eq=False)
class SketchState:
    values: np.ndarray  # (rows, columns) float32, 0.0 where unoccupied
    occupied: np.ndarray  # (rows, columns) bool
    config: SketchConfig
    weight_count: int = 0
    _frozen: bool = field(default=False, repr=False)

    def freeze(self) -> "SketchState":
        self.values.setflags(write=False)
        self.occupied.setflags(write=False)
        self._frozen = True
        return self

    @property
    def unoccupied_fraction(self) -> float:
        return 1.0 - float(self.occupied.mean())

    def identical(self, other: "SketchState") -> bool:
        """Bit-level equality of values, masks, config and weight count."""
        return (
            self.config == other.config
            and self.weight_count == other.weight_count
            and np.array_equal(self.occupied, other.occupied)
            and self.values.tobytes() == other.values.tobytes()
        )


def empty_state(config: SketchConfig) -> SketchState:
    shape = (config.rows, config.columns)
    return SketchState(np.zeros(shape, np.float32), np.zeros(shape, bool), config)


def hash_index(config: SketchConfig, row: int, addr: int) -> int:
    return config.family.index(row, addr, config.columns)


# -- ordering keys -----------------------------------------------------------
# A float32's magnitude bits sort like its absolute value. Appending the sign
# bit as the least significant bit makes +x sort before -x at equal magnitude.


def _min_abs_key(v: np.ndarray) -> np.ndarray:
    bits = v.view(np.uint32)
    return ((bits & _ABS_MASK).astype(np.uint64) << np.uint64(1)) | (bits >> np.uint32(31)).astype(np.uint64)


def _max_abs_key(v: np.ndarray) -> np.ndarray:
    bits = v.view(np.uint32)
    inv = (_ABS_MASK - (bits & _ABS_MASK)).astype(np.uint64)
    return (inv << np.uint64(1)) | (bits >> np.uint32(31)).astype(np.uint64)


def _prefers(candidate: float, current: float, smaller_abs: bool) -> bool:
    a = np.float32(candidate)
    b = np.float32(current)
    ka = _min_abs_key(np.array([a])) if smaller_abs else _max_abs_key(np.array([a]))
    kb = _min_abs_key(np.array([b])) if smaller_abs else _max_abs_key(np.array([b]))
    return bool(ka[0] < kb[0])


def update(state: SketchState, addr: int, w: float) -> None:
    """Insert one weight into every row of ``state`` (in place)."""
    if state._frozen:
        raise ValueError("state is frozen; compression has completed")
    w32 = np.float32(w)
    if not np.isfinite(w32):
        raise ValueError(f"weight must be finite, got {w}")
    variant = state.config.variant
    for row in range(state.config.rows):
        col = hash_index(state.config, row, addr)
        if not state.occupied[row, col]:
            state.values[row, col] = w32
            state.occupied[row, col] = True
        elif variant is Variant.COUNT_MIN:
            state.values[row, col] = np.float32(np.float64(state.values[row, col]) + np.float64(w32))
        elif _prefers(w32, state.values[row, col], smaller_abs=variant is Variant.ABS_MAX_MIN):
            state.values[row, col] = w32
    state.weight_count = max(state.weight_count, addr + 1)


def _bonded(state: SketchState, addrs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cfg = state.config
    cols = cfg.family.all_indices(addrs, cfg.columns)
    rows = np.arange(cfg.rows)[:, None]
    if not state.occupied[rows, cols].all():
        raise ValueError("retrieval touched an unoccupied cell; address was never inserted")
    return state.values[rows, cols], cols


def _select(cells: np.ndarray, variant: Variant) -> np.ndarray:
    if variant is Variant.ABS_MAX_MIN:
        key = _max_abs_key(cells)
    else:
        key = _min_abs_key(cells)
    return np.argmin(key, axis=0)


def retrieve(state: SketchState, addr: int) -> float:
    """Approximate value of the weight stored at ``addr``."""
    if not 0 <= addr < state.weight_count:
        raise IndexError(f"address {addr} was not inserted (weight_count={state.weight_count})")
    cells, _ = _bonded(state, np.array([addr]))
    row = _select(cells, state.config.variant)[0]
    return float(cells[row, 0])


def selected_rows(state: SketchState) -> np.ndarray:
    """Row whose cell each weight's retrieval returns."""
    cells, _ = _bonded(state, np.arange(state.weight_count))
    return _select(cells, state.config.variant)


def decompress_unit(state: SketchState, count: int, exclude=None) -> np.ndarray:
    """Retrieve all ``count`` weights of a unit as a float32 vector.

    Addresses in ``exclude`` (left out at compression) come back as 0.0.
    """
    if count != state.weight_count:
        raise ValueError(f"count {count} does not match weight_count {state.weight_count}")
    out = np.zeros(count, np.float32)
    addrs = _kept(count, exclude)
    if addrs.size == 0:
        return out
    cells, _ = _bonded(state, addrs)
    pick = _select(cells, state.config.variant)
    out[addrs] = cells[pick, np.arange(addrs.size)]
    return out


def _kept(count: int, exclude) -> np.ndarray:
    if exclude is None or len(exclude) == 0:
        return np.arange(count)
    keep = np.ones(count, bool)
    keep[np.asarray(exclude, np.int64)] = False
    return np.flatnonzero(keep)


def _reduce_row(cols: np.ndarray, w: np.ndarray, columns: int, variant: Variant) -> tuple[np.ndarray, np.ndarray]:
    values = np.zeros(columns, np.float32)
    occupied = np.zeros(columns, bool)
    if variant is Variant.COUNT_MIN:
        # sort by (cell, value bits) so the summation order ignores input order
        key = (cols.astype(np.uint64) << np.uint64(32)) | w.view(np.uint32).astype(np.uint64)
        order = np.argsort(key, kind="stable")
        sc = cols[order]
        starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
        sums = np.add.reduceat(w[order].astype(np.float64), starts)
        values[sc[starts]] = sums.astype(np.float32)
        occupied[sc[starts]] = True
        return values, occupied
    key = _min_abs_key(w) if variant is Variant.ABS_MAX_MIN else _max_abs_key(w)
    # cell index in the top bits, magnitude/sign key below; 33 bits suffice for the key
    combined = (cols.astype(np.uint64) << np.uint64(33)) | key
    s = np.sort(combined)
    cell = (s >> np.uint64(33)).astype(np.int64)
    first = np.r_[True, cell[1:] != cell[:-1]]
    win = s[first] & np.uint64((1 << 33) - 1)
    mag = (win >> np.uint64(1)).astype(np.uint32)
    if variant is Variant.ABS_MIN_MAX:
        mag = _ABS_MASK - mag
    bits = mag | ((win & np.uint64(1)).astype(np.uint32) << np.uint32(31))
    values[cell[first]] = bits.view(np.float32)
    occupied[cell[first]] = True
    return values, occupied


def compress_unit(weights, config: SketchConfig, exclude=None) -> SketchState:
    """Build a frozen sketch state from a flat weight sequence.

    Weights are stored as float32; address ``j`` is the position in
    ``weights``. Addresses listed in ``exclude`` are not inserted (used for
    weights stored outside the sketch) but still count towards
    ``weight_count``.
    """
    w = np.ascontiguousarray(np.asarray(weights, dtype=np.float32).ravel())
    if w.size == 0:
        raise ValueError("cannot compress an empty weight sequence")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    if w.size >= 2**31:
        raise ValueError("compression units are limited to 2^31 - 1 weights")
    state = empty_state(config)
    addrs = _kept(w.size, exclude)
    if addrs.size:
        cols = config.family.all_indices(addrs, config.columns)
        kept = w[addrs]
        for row in range(config.rows):
            state.values[row], state.occupied[row] = _reduce_row(cols[row], kept, config.columns, config.variant)
    state.weight_count = int(w.size)
    return state.freeze()
