"""Whole-tensor compression: unit layout, space allocation, outliers, quantization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import CompressionReport, report
from .hashing import derive_seed
from .importance import (
    DEFAULT_FLOOR,
    Granularity,
    ImportanceProfile,
    Outliers,
    allocate_columns,
    split_topk_outliers,
)
from .quant import DEFAULT_BASE_WIDTH, QuantizedState, QuantSpec, dequantize_state, quantize_state
from .sketch import SketchConfig, SketchState, Variant, compress_unit, decompress_unit

# an outlier costs a 32-bit index plus a 32-bit value, i.e. two state elements
OUTLIER_ELEMENTS = 2


@dataclass
class CompressedTensor:
    shape: tuple[int, ...]
    variant: Variant
    rows: int
    seed: int
    granularity: Granularity
    test_hash: bool
    units: list[SketchState]  # dequantized view when quantized
    quant: QuantSpec = field(default_factory=QuantSpec)
    quantized: list[QuantizedState] | None = None
    outliers: Outliers = field(default_factory=lambda: Outliers(np.zeros(0, np.int64), np.zeros(0, np.float32)))

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def unit_lengths(self) -> list[int]:
        return [u.weight_count for u in self.units]

    @property
    def state_elements(self) -> int:
        return sum(u.config.size for u in self.units)

    @property
    def element_rate(self) -> float:
        """State elements per original weight (outliers excluded)."""
        return self.state_elements / self.weight_count

    def equivalent_bits(self, base_width: int = DEFAULT_BASE_WIDTH) -> float:
        """Bits per original weight, counting outlier pairs at 64 bits each."""
        width = self.quant.bits if self.quant.active else base_width
        bits = self.state_elements * width + len(self.outliers) * 64
        return bits / self.weight_count


def unit_layout(shape: tuple[int, ...], granularity: Granularity) -> list[int]:
    """Weights per compression unit; ``row`` splits on the first axis."""
    n = int(np.prod(shape, dtype=np.int64))
    if n == 0:
        raise ValueError("cannot compress an empty tensor")
    if granularity is Granularity.ROW and len(shape) >= 1 and shape[0] > 1:
        return [n // shape[0]] * shape[0]
    return [n]


def unit_config(
    unit: int, columns: int, rows: int, variant: Variant, seed: int, test_hash: bool
) -> SketchConfig:
    return SketchConfig(columns, rows, variant, derive_seed(seed, unit), test_hash)


def compress_tensor(
    tensor,
    rate: float,
    rows: int = 3,
    seed: int = 0,
    variant: Variant = Variant.ABS_MAX_MIN,
    granularity: Granularity = Granularity.UNIFORM,
    importance: ImportanceProfile | np.ndarray | None = None,
    quant: QuantSpec | None = None,
    topk: int = 0,
    floor: int = DEFAULT_FLOOR,
    test_hash: bool = False,
) -> CompressedTensor:
    """Compress a float32 tensor to ``rate`` state elements per weight.

    The element budget ``floor(rate * n)`` minus the outlier cost is split
    into columns across units (uniformly, or by ``importance``).
    """
    w = np.asarray(tensor, np.float32)
    shape = tuple(int(d) for d in w.shape)
    flat = w.ravel()
    if not rate > 0:
        raise ValueError(f"rate must be positive, got {rate}")
    granularity = Granularity(granularity)
    variant = Variant(variant)
    quant = quant or QuantSpec()
    lengths = unit_layout(shape, granularity)
    n = flat.size

    budget = int(np.floor(rate * n)) - OUTLIER_ELEMENTS * topk
    total_columns = budget // rows
    if importance is not None:
        scores = importance.scores if isinstance(importance, ImportanceProfile) else np.asarray(importance, np.float64)
        if scores.ndim != 1 or scores.size != len(lengths):
            raise ValueError(f"importance has {scores.size} scores but the tensor has {len(lengths)} units")
        if granularity is Granularity.UNIFORM:
            scores = np.ones(len(lengths))
    else:
        scores = np.ones(len(lengths))
    if total_columns < floor * len(lengths):
        raise ValueError(
            f"rate {rate} leaves {max(total_columns, 0)} columns per row for {len(lengths)} units; "
            f"the floor needs {floor * len(lengths)}"
        )
    plan = allocate_columns(scores, total_columns, floor)

    outliers, remainder = split_topk_outliers(flat, topk)
    starts = np.cumsum([0] + lengths[:-1])
    units = []
    for u, (start, length, cols) in enumerate(zip(starts, lengths, plan.per_unit_columns)):
        local = outliers.indices[(outliers.indices >= start) & (outliers.indices < start + length)] - start
        cfg = unit_config(u, cols, rows, variant, seed, test_hash)
        units.append(compress_unit(remainder[start : start + length], cfg, exclude=np.sort(local)))

    quantized = None
    if quant.active:
        quantized = [quantize_state(s, quant) for s in units]
        units = [dequantize_state(q) for q in quantized]
    return CompressedTensor(shape, variant, rows, seed, granularity, test_hash, units, quant, quantized, outliers)


def decompress_tensor(ct: CompressedTensor) -> np.ndarray:
    parts = []
    start = 0
    idx = ct.outliers.indices
    for state in ct.units:
        length = state.weight_count
        local = idx[(idx >= start) & (idx < start + length)] - start
        parts.append(decompress_unit(state, length, exclude=local))
        start += length
    flat = np.concatenate(parts) if parts else np.zeros(0, np.float32)
    return ct.outliers.apply(flat).reshape(ct.shape)


def tensor_report(original, ct: CompressedTensor) -> CompressionReport:
    return report(np.asarray(original, np.float32).ravel(), decompress_tensor(ct).ravel(), ct.units, ct.quant.active)
