"""Group-wise symmetric absmax quantization of sketch states (q8 / q4)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sketch import SketchConfig, SketchState

DEFAULT_GROUP_SIZE = 128
DEFAULT_BASE_WIDTH = 16
_QMAX = {8: 127, 4: 7}
# scales keep 16 significant bits so code * scale (<= 8 + 16 bits) is exact in float32
_SCALE_BITS = 16


@dataclass(frozen=True)
class QuantSpec:
    bits: int | None = None
    group_size: int = DEFAULT_GROUP_SIZE

    def __post_init__(self) -> None:
        if self.bits is not None and self.bits not in _QMAX:
            raise ValueError(f"bits must be 4, 8 or None, got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")

    @classmethod
    def parse(cls, name: str, group_size: int = DEFAULT_GROUP_SIZE) -> "QuantSpec":
        table = {"none": None, "q8": 8, "q4": 4}
        if name not in table:
            raise ValueError(f"unknown quantization {name!r}; expected one of {sorted(table)}")
        return cls(table[name], group_size)

    @property
    def active(self) -> bool:
        return self.bits is not None

    @property
    def qmax(self) -> int:
        return _QMAX[self.bits]

    @property
    def name(self) -> str:
        return "none" if self.bits is None else f"q{self.bits}"


@dataclass(eq=False)
class QuantizedState:
    codes: np.ndarray  # int8, one per state element (row-major), 0 where unoccupied
    scales: np.ndarray  # float32, one per group
    occupied: np.ndarray  # (rows, columns) bool
    config: SketchConfig
    spec: QuantSpec
    weight_count: int

    def packed_codes(self) -> bytes:
        return pack_codes(self.codes, self.spec.bits)


def round_half_away(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), x)


def _snap_scale(raw: np.ndarray) -> np.ndarray:
    m, e = np.frexp(raw)
    m = np.round(m * 2.0**_SCALE_BITS) / 2.0**_SCALE_BITS
    return np.ldexp(m, e).astype(np.float32)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """8-bit codes as int8; 4-bit codes two per byte, low nibble first."""
    c = np.asarray(codes, np.int8)
    if bits == 8:
        return c.tobytes()
    if bits != 4:
        raise ValueError(f"cannot pack {bits}-bit codes")
    nib = (c.astype(np.uint8) & np.uint8(0x0F))
    if nib.size % 2:
        nib = np.r_[nib, np.uint8(0)]
    return (nib[0::2] | (nib[1::2] << np.uint8(4))).astype(np.uint8).tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    if bits == 8:
        if len(data) != count:
            raise ValueError(f"expected {count} code bytes, got {len(data)}")
        return np.frombuffer(data, np.int8).copy()
    if bits != 4:
        raise ValueError(f"cannot unpack {bits}-bit codes")
    if len(data) != (count + 1) // 2:
        raise ValueError(f"expected {(count + 1) // 2} code bytes, got {len(data)}")
    b = np.frombuffer(data, np.uint8)
    nib = np.empty(b.size * 2, np.uint8)
    nib[0::2] = b & 0x0F
    nib[1::2] = b >> 4
    nib = nib[:count].astype(np.int8)
    return np.where(nib > 7, nib - 16, nib).astype(np.int8)


def packed_size(count: int, bits: int) -> int:
    return count if bits == 8 else (count + 1) // 2


def group_count(size: int, group_size: int) -> int:
    return -(-size // group_size)


def quantize_state(state: SketchState, spec: QuantSpec) -> QuantizedState:
    """Quantize every ``group_size`` consecutive state elements with one scale.

    The scale is the group's largest occupied magnitude over the largest code
    (127 or 7), rounded to 16 significant bits; codes round half away from
    zero. Unoccupied cells and all-zero groups encode as 0.
    """
    if not spec.active:
        raise ValueError("quantize_state needs an active QuantSpec (q8 or q4)")
    v = state.values.astype(np.float64).ravel()
    occ = state.occupied.ravel()
    if not np.isfinite(v[occ]).all():
        raise ValueError("state holds non-finite values")
    g = spec.group_size
    ngroups = group_count(v.size, g)
    pad = ngroups * g - v.size
    mag = np.abs(np.where(occ, v, 0.0))
    amax = np.r_[mag, np.zeros(pad)].reshape(ngroups, g).max(axis=1)
    scales = np.zeros(ngroups, np.float32)
    nz = amax > 0
    scales[nz] = _snap_scale(amax[nz] / spec.qmax)
    per_elem = np.repeat(scales.astype(np.float64), g)[: v.size]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(per_elem > 0, v / per_elem, 0.0)
    codes = np.clip(round_half_away(q), -spec.qmax, spec.qmax)
    codes = np.where(occ, codes, 0).astype(np.int8)
    return QuantizedState(codes, scales, state.occupied.copy(), state.config, spec, state.weight_count)


def dequantize_state(qstate: QuantizedState) -> SketchState:
    cfg = qstate.config
    size = cfg.size
    if qstate.codes.size != size or qstate.occupied.shape != (cfg.rows, cfg.columns):
        raise ValueError("codes/mask do not match the sketch shape")
    if qstate.scales.size != group_count(size, qstate.spec.group_size):
        raise ValueError("scale count does not match the group layout")
    per_elem = np.repeat(qstate.scales, qstate.spec.group_size)[:size]
    values = qstate.codes.astype(np.float32) * per_elem
    values = np.where(qstate.occupied.ravel(), values, np.float32(0)).astype(np.float32)
    state = SketchState(values.reshape(cfg.rows, cfg.columns), qstate.occupied.copy(), cfg, qstate.weight_count)
    return state.freeze()


def equivalent_bits(rate: float, bits: int | None = None, base_width: int = DEFAULT_BASE_WIDTH) -> float:
    """Bits per original weight: state-to-weight element ratio times element width."""
    return rate * (bits if bits is not None else base_width)
