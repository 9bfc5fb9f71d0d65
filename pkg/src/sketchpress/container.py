"""Binary containers: ``USLT`` for dense tensors, ``USLS`` for compressed tensors.

All integers are little-endian. A tensor file is::

    magic "USLT" | version u16 | dtype u8 (0 = float32) | ndim u8 | dims u64 * ndim
    | float32 payload, row-major

A sketch file is::

    magic "USLS" | version u16 | variant u8 | rows u8 | flags u8 (bit 0: test hash)
    | granularity u8 | master seed u64 | ndim u8 | dims u64 * ndim | units u32
    | quant scheme u8 (0 none, 1 symmetric absmax) | bits u8 | group size u32
    | outliers u64 | per unit: columns u32, weight_count u64
    | per unit: occupied mask (bit-packed, little bit order)
      then float32 values, or float32 group scales + packed codes
    | outlier indices u32 * K | outlier values float32 * K
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .codec import CompressedTensor, unit_config
from .importance import Granularity, Outliers
from .quant import QuantizedState, QuantSpec, dequantize_state, group_count, pack_codes, packed_size, unpack_codes
from .sketch import SketchState, Variant

TENSOR_MAGIC = b"USLT"
SKETCH_MAGIC = b"USLS"
VERSION = 1
DTYPE_F32 = 0
_MAX_NDIM = 255


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        vals = struct.unpack("<" + fmt, self.take(size))
        return vals if len(vals) > 1 else vals[0]

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dt).astype(np.dtype(dtype).newbyteorder("="))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes after payload")


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = r.unpack("H")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (this build reads version {VERSION})")


def _shape_bytes(shape: tuple[int, ...]) -> bytes:
    if len(shape) > _MAX_NDIM:
        raise FormatError(f"too many dimensions: {len(shape)}")
    return struct.pack("<B", len(shape)) + b"".join(struct.pack("<Q", d) for d in shape)


def _read_shape(r: _Reader) -> tuple[int, ...]:
    ndim = r.unpack("B")
    shape = tuple(int(r.unpack("Q")) for _ in range(ndim))
    total = 1
    for d in shape:
        total *= d
        if total > 2**48:
            raise FormatError(f"dimensions {shape} overflow the supported element count")
    return shape


# -- tensors -----------------------------------------------------------------


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if a.dtype != np.float32:
        if not np.can_cast(a.dtype, np.float32, "same_kind"):
            raise FormatError(f"only float32 tensors are supported, got {a.dtype}")
        a = a.astype(np.float32)
    head = TENSOR_MAGIC + struct.pack("<HB", VERSION, DTYPE_F32) + _shape_bytes(a.shape)
    return head + np.ascontiguousarray(a, "<f4").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    r = _Reader(data)
    _check_header(r, TENSOR_MAGIC)
    dtype = r.unpack("B")
    if dtype != DTYPE_F32:
        raise FormatError(f"unknown dtype code {dtype}")
    shape = _read_shape(r)
    count = int(np.prod(shape, dtype=np.int64))
    values = r.array(np.float32, count).reshape(shape)
    r.done()
    return values


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- sketches ----------------------------------------------------------------


def encode_sketch(ct: CompressedTensor) -> bytes:
    buf = io.BytesIO()
    flags = 1 if ct.test_hash else 0
    buf.write(SKETCH_MAGIC)
    buf.write(struct.pack("<HBBBBQ", VERSION, ct.variant.code, ct.rows, flags, ct.granularity.code, ct.seed & (2**64 - 1)))
    buf.write(_shape_bytes(ct.shape))
    q = ct.quant
    buf.write(struct.pack("<IBBIQ", len(ct.units), 1 if q.active else 0, q.bits or 0, q.group_size, len(ct.outliers)))
    for s in ct.units:
        buf.write(struct.pack("<IQ", s.config.columns, s.weight_count))
    for u, s in enumerate(ct.units):
        buf.write(np.packbits(s.occupied.ravel(), bitorder="little").tobytes())
        if q.active:
            qs = ct.quantized[u]
            buf.write(qs.scales.astype("<f4").tobytes())
            buf.write(pack_codes(qs.codes, q.bits))
        else:
            buf.write(s.values.astype("<f4").tobytes())
    buf.write(ct.outliers.indices.astype("<u4").tobytes())
    buf.write(ct.outliers.values.astype("<f4").tobytes())
    return buf.getvalue()


def decode_sketch(data: bytes) -> CompressedTensor:
    r = _Reader(data)
    _check_header(r, SKETCH_MAGIC)
    variant_code, rows, flags, gran_code, seed = r.unpack("BBBBQ")
    try:
        variant = Variant.from_code(variant_code)
        granularity = Granularity.from_code(gran_code)
    except (ValueError, IndexError) as exc:
        raise FormatError(str(exc)) from None
    if rows < 1:
        raise FormatError("sketch must have at least one row")
    shape = _read_shape(r)
    n_units, scheme, bits, group_size, n_out = r.unpack("IBBIQ")
    if scheme not in (0, 1) or (scheme == 1 and bits not in (4, 8)):
        raise FormatError(f"bad quantization header: scheme={scheme} bits={bits}")
    try:
        spec = QuantSpec(bits if scheme else None, group_size)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    heads = [r.unpack("IQ") for _ in range(n_units)]
    test_hash = bool(flags & 1)

    units: list[SketchState] = []
    quantized: list[QuantizedState] | None = [] if spec.active else None
    for u, (columns, count) in enumerate(heads):
        if columns < 1:
            raise FormatError(f"unit {u} has zero columns")
        cfg = unit_config(u, columns, rows, variant, seed, test_hash)
        size = cfg.size
        mask = np.unpackbits(np.frombuffer(r.take(-(-size // 8)), np.uint8), bitorder="little")[:size]
        occupied = mask.astype(bool).reshape(rows, columns)
        if spec.active:
            scales = r.array(np.float32, group_count(size, spec.group_size))
            codes = unpack_codes(r.take(packed_size(size, spec.bits)), spec.bits, size)
            qs = QuantizedState(codes, scales, occupied, cfg, spec, int(count))
            quantized.append(qs)
            units.append(dequantize_state(qs))
        else:
            values = r.array(np.float32, size).reshape(rows, columns)
            units.append(SketchState(values, occupied, cfg, int(count)).freeze())
    idx = r.array(np.uint32, n_out).astype(np.int64)
    vals = r.array(np.float32, n_out)
    r.done()

    total = int(np.prod(shape, dtype=np.int64))
    if sum(s.weight_count for s in units) != total:
        raise FormatError("unit weight counts do not add up to the tensor size")
    if n_out and idx.max() >= total:
        raise FormatError("outlier index out of range")
    return CompressedTensor(shape, variant, rows, seed, granularity, test_hash, units, spec, quantized, Outliers(idx, vals))


def write_sketch(path, ct: CompressedTensor) -> None:
    Path(path).write_bytes(encode_sketch(ct))


def read_sketch(path) -> CompressedTensor:
    return decode_sketch(Path(path).read_bytes())


def payload_bytes(ct: CompressedTensor) -> int:
    """Bytes of masks, values/codes/scales and outliers (everything but headers)."""
    total = 0
    for s in ct.units:
        size = s.config.size
        total += -(-size // 8)
        if ct.quant.active:
            total += 4 * group_count(size, ct.quant.group_size) + packed_size(size, ct.quant.bits)
        else:
            total += 4 * size
    return total + 8 * len(ct.outliers)


def header_bytes(ct: CompressedTensor) -> int:
    fixed = len(SKETCH_MAGIC) + struct.calcsize("<HBBBBQ") + 1 + struct.calcsize("<IBBIQ")
    return fixed + 8 * len(ct.shape) + struct.calcsize("<IQ") * len(ct.units)
