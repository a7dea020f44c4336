"""Blockwise NormalFloat quantization with two-level scale compression.

A matrix is flattened row-major and cut into blocks of B0 entries.  Each
block stores its absolute maximum s and codes every entry as the nearest
codebook level of u / s.  The vector of block scales is itself quantized:
groups of B1 consecutive scales share one group maximum v, each scale is
coded as an unsigned integer on a uniform [0, v] grid, and v is stored in
a reduced float format.  Storage cost per parameter is therefore

    b0 + b1 / B0 + width(b2) / (B0 * B1)

exactly, which `storage_bits_per_param` reports as a rational number.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .codebook import SUPPORTED_BITS, build_codebook
from .errors import FormatError
from .packing import pack_bits, packed_size, padding_is_zero, unpack_bits

# Reduced float formats usable for group scales, tag -> bit width.
FLOAT_FORMATS = {"fp32": 32, "fp16": 16, "bf16": 16}

_FP16_MAX = 65504.0
_BF16_MAX_BITS = np.uint32(0x7F7F0000)  # largest finite bf16, widened


@dataclass(frozen=True)
class QuantConfig:
    """Full description of one double-quantization setting."""

    b0: int
    b1: int
    b2: str
    B0: int
    B1: int

    def __post_init__(self):
        if self.b0 not in SUPPORTED_BITS:
            raise ValueError(f"b0 must be one of {SUPPORTED_BITS}, got {self.b0}")
        if self.b1 not in SUPPORTED_BITS:
            raise ValueError(f"b1 must be one of {SUPPORTED_BITS}, got {self.b1}")
        if self.b2 not in FLOAT_FORMATS:
            raise ValueError(f"b2 must be one of {sorted(FLOAT_FORMATS)}, got {self.b2!r}")
        if self.B0 < 1 or self.B1 < 1:
            raise ValueError("block sizes B0 and B1 must be positive")

    @classmethod
    def parse(cls, text: str) -> "QuantConfig":
        """Parse the CLI form 'b0,b1,b2,B0,B1', e.g. '4,8,fp32,64,256'."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 5:
            raise ValueError(f"config must have 5 comma-separated fields, got {text!r}")
        try:
            return cls(int(parts[0]), int(parts[1]), parts[2], int(parts[3]), int(parts[4]))
        except ValueError as exc:
            raise ValueError(f"bad config {text!r}: {exc}") from exc

    def label(self) -> str:
        return f"{self.b0},{self.b1},{self.b2},{self.B0},{self.B1}"

    def as_tuple(self):
        return (self.b0, self.b1, self.b2, self.B0, self.B1)


def storage_bits_per_param(cfg: QuantConfig) -> Fraction:
    """Exact storage cost in bits per matrix entry."""
    width = FLOAT_FORMATS[cfg.b2]
    return Fraction(cfg.b0) + Fraction(cfg.b1, cfg.B0) + Fraction(width, cfg.B0 * cfg.B1)


def cast_float(values, fmt: str) -> np.ndarray:
    """Round values to a reduced float format, returned widened to fp32.

    Rounding is to nearest, ties to even; out-of-range magnitudes
    saturate to the largest finite value of the target format.
    """
    if fmt not in FLOAT_FORMATS:
        raise ValueError(f"unknown float format {fmt!r}")
    arr = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cast_float requires finite inputs")
    if fmt == "fp32":
        return arr.copy()
    if fmt == "fp16":
        clipped = np.clip(arr, -_FP16_MAX, _FP16_MAX)
        return clipped.astype(np.float16).astype(np.float32)
    bits = arr.view(np.uint32)
    rounded = (bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))) >> np.uint32(16)
    rounded = rounded.astype(np.uint32) << np.uint32(16)
    overflowed = (rounded & np.uint32(0x7F800000)) == np.uint32(0x7F800000)
    rounded = np.where(overflowed, (rounded & np.uint32(0x80000000)) | _BF16_MAX_BITS, rounded)
    return rounded.view(np.float32)


def _segment_starts(n: int, size: int) -> np.ndarray:
    return np.arange(0, n, size, dtype=np.int64)


def _segment_lengths(n: int, size: int) -> np.ndarray:
    starts = _segment_starts(n, size)
    return np.diff(np.append(starts, n))


def _unsigned_codes(values: np.ndarray, bits: int, group_size: int):
    """Shared round-to-nearest core: returns (codes, group maxima)."""
    n = values.size
    starts = _segment_starts(n, group_size)
    gmax = np.maximum.reduceat(values, starts)
    levels = (1 << bits) - 1
    steps = gmax / levels
    per = np.repeat(steps, _segment_lengths(n, group_size))
    with np.errstate(invalid="ignore"):
        x = np.divide(values, per, out=np.zeros_like(values), where=per > 0)
    # round half away from zero; inputs are nonnegative
    codes = np.clip(np.floor(x + 0.5), 0, levels).astype(np.uint8)
    return codes, gmax, steps


def rtn_quantize_unsigned(values, bits: int, group_size: int):
    """Uniform unsigned round-to-nearest coding of a nonnegative vector.

    Per group of `group_size` entries the scale is max(group) / (2**bits - 1)
    and each code is round(value / scale), half away from zero, clamped to
    [0, 2**bits - 1].  All-zero groups emit zero codes and zero scale.
    Returns (codes, per-group scales).  Reconstruct entries as
    (code * group_max) / (2**bits - 1) -- multiplying before dividing keeps
    the group maximum exact for inputs with float32-sized mantissas.
    """
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    if group_size < 1:
        raise ValueError("group_size must be positive")
    arr = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("cannot quantize an empty vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("values must be finite")
    if np.any(arr < 0):
        raise ValueError("values must be nonnegative")
    codes, _, steps = _unsigned_codes(arr, bits, group_size)
    return codes, steps


@dataclass(frozen=True)
class QuantizedMatrix:
    """Container for one quantized matrix, immutable after construction."""

    rows: int
    cols: int
    config: QuantConfig
    codes: bytes
    s_codes: bytes
    group_scales: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise FormatError("matrix dimensions must be positive")
        n, n_blocks, n_groups = self.counts()
        if len(self.codes) != packed_size(n, self.config.b0):
            raise FormatError(
                f"code stream holds {len(self.codes)} bytes, expected "
                f"{packed_size(n, self.config.b0)}"
            )
        if len(self.s_codes) != packed_size(n_blocks, self.config.b1):
            raise FormatError(
                f"scale-code stream holds {len(self.s_codes)} bytes, expected "
                f"{packed_size(n_blocks, self.config.b1)}"
            )
        scales = np.ascontiguousarray(self.group_scales, dtype=np.float32)
        if scales.shape != (n_groups,):
            raise FormatError(f"expected {n_groups} group scales, got {scales.shape}")
        if not np.all(np.isfinite(scales)) or np.any(scales < 0):
            raise FormatError("group scales must be finite and nonnegative")
        scales.flags.writeable = False
        object.__setattr__(self, "group_scales", scales)

    def counts(self):
        n = self.rows * self.cols
        n_blocks = -(-n // self.config.B0)
        n_groups = -(-n_blocks // self.config.B1)
        return n, n_blocks, n_groups


def nearest_level_codes(normalized, codebook) -> np.ndarray:
    """Index of the nearest codebook level for each value in [-1, 1].

    A value sitting exactly on the midpoint between two levels takes the
    lower index.
    """
    values = np.asarray(normalized, dtype=np.float64)
    return np.searchsorted(codebook.midpoints, values, side="left").astype(np.uint8)


def quantize_nf(m, cfg: QuantConfig) -> QuantizedMatrix:
    """Quantize a float32 matrix to NormalFloat codes with coded scales."""
    a = np.ascontiguousarray(m, dtype=np.float32)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("expected a nonempty 2-d matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    cb = build_codebook(cfg.b0)
    flat = a.ravel().astype(np.float64)
    n = flat.size

    absmax = np.maximum.reduceat(np.abs(flat), _segment_starts(n, cfg.B0))
    per_entry = np.repeat(absmax, _segment_lengths(n, cfg.B0))
    with np.errstate(invalid="ignore"):
        normalized = np.divide(flat, per_entry, out=np.zeros_like(flat), where=per_entry > 0)
    codes = nearest_level_codes(normalized, cb)

    s_codes, gmax, _ = _unsigned_codes(absmax, cfg.b1, cfg.B1)
    scales = cast_float(gmax, cfg.b2)

    # Blocks whose coded scale reconstructs to zero carry no signal in
    # their entry codes; store the zero level there so repeated
    # quantize/dequantize round trips are byte-stable.
    shat = _block_scales(s_codes, scales, cfg)
    dead = np.repeat(shat == 0.0, _segment_lengths(n, cfg.B0))
    if dead.any():
        codes = codes.copy()
        codes[dead] = cb.zero_index

    return QuantizedMatrix(
        rows=a.shape[0],
        cols=a.shape[1],
        config=cfg,
        codes=pack_bits(codes, cfg.b0),
        s_codes=pack_bits(s_codes, cfg.b1),
        group_scales=scales,
    )


def _block_scales(s_codes: np.ndarray, group_scales: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Reconstructed per-block scale vector, in float64."""
    n_blocks = s_codes.size
    per_block_v = np.repeat(group_scales.astype(np.float64), _segment_lengths(n_blocks, cfg.B1))
    # multiply before dividing: exact for codes up to 8 bits against
    # float32-representable group scales
    return (s_codes.astype(np.float64) * per_block_v) / ((1 << cfg.b1) - 1)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    """Reconstruct the float32 matrix a container encodes."""
    cfg = q.config
    n, n_blocks, _ = q.counts()
    codes = unpack_bits(q.codes, cfg.b0, n)
    s_codes = unpack_bits(q.s_codes, cfg.b1, n_blocks)
    shat = _block_scales(s_codes, q.group_scales, cfg)
    per_entry = np.repeat(shat, _segment_lengths(n, cfg.B0))
    cb = build_codebook(cfg.b0)
    out = (cb.levels[codes] * per_entry).astype(np.float32)
    return out.reshape(q.rows, q.cols)


def matmul_dequant(x, q: QuantizedMatrix, factors=None) -> np.ndarray:
    """Multiply activations by a quantized matrix, plus optional factors.

    Computes x @ dequantize(q) (+ (x @ L1) @ L2 when factors are given)
    without materializing anything beyond the dequantized weight.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError("activations must be 2-d")
    if x.shape[1] != q.rows:
        raise ValueError(f"activation width {x.shape[1]} does not match matrix rows {q.rows}")
    out = x @ dequantize(q)
    if factors is not None:
        l1 = np.asarray(factors.l1, dtype=np.float32)
        l2 = np.asarray(factors.l2, dtype=np.float32)
        if l1.shape[0] != q.rows or l2.shape[1] != q.cols or l1.shape[1] != l2.shape[0]:
            raise ValueError("factor shapes do not match the quantized matrix")
        out = out + (x @ l1) @ l2
    return out


# ---------------------------------------------------------------------------
# container serialization
# ---------------------------------------------------------------------------

_MAGIC = b"LQQ1"
_HEADER = struct.Struct("<4sHQQBBBII")
_B2_TAGS = {"fp32": 0, "fp16": 1, "bf16": 2}
_B2_NAMES = {v: k for k, v in _B2_TAGS.items()}

HEADER_BYTES = _HEADER.size


def container_layout(rows: int, cols: int, cfg: QuantConfig):
    """Byte sizes of the container sections: header, codes, s_codes, scales."""
    n = rows * cols
    n_blocks = -(-n // cfg.B0)
    n_groups = -(-n_blocks // cfg.B1)
    return (
        HEADER_BYTES,
        packed_size(n, cfg.b0),
        packed_size(n_blocks, cfg.b1),
        n_groups * (FLOAT_FORMATS[cfg.b2] // 8),
    )


def exact_container_bytes(rows: int, cols: int, cfg: QuantConfig) -> int:
    """Exact serialized size of a quantized matrix, header included."""
    return sum(container_layout(rows, cols, cfg))


def _scales_to_bytes(scales: np.ndarray, fmt: str) -> bytes:
    if fmt == "fp32":
        return scales.astype("<f4").tobytes()
    if fmt == "fp16":
        # values are already fp16-representable, so the cast is exact
        return scales.astype("<f2").tobytes()
    return (scales.view(np.uint32) >> np.uint32(16)).astype("<u2").tobytes()


def _scales_from_bytes(raw: bytes, fmt: str) -> np.ndarray:
    if fmt == "fp32":
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if fmt == "fp16":
        return np.frombuffer(raw, dtype="<f2").astype(np.float32)
    bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << np.uint32(16)
    return bits.view(np.float32).copy()


def write_quantized(path, q: QuantizedMatrix) -> None:
    header = _HEADER.pack(
        _MAGIC, 1, q.rows, q.cols, q.config.b0, q.config.b1,
        _B2_TAGS[q.config.b2], q.config.B0, q.config.B1,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.codes)
        fh.write(q.s_codes)
        fh.write(_scales_to_bytes(q.group_scales, q.config.b2))


def read_quantized(path) -> QuantizedMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_BYTES:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols, b0, b1, b2_tag, bs0, bs1 = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    if b2_tag not in _B2_NAMES:
        raise FormatError(f"{path}: unknown scale format tag {b2_tag}")
    try:
        cfg = QuantConfig(b0, b1, _B2_NAMES[b2_tag], bs0, bs1)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    header_b, code_b, scode_b, scale_b = container_layout(rows, cols, cfg)
    if len(blob) != header_b + code_b + scode_b + scale_b:
        raise FormatError(
            f"{path}: payload holds {len(blob) - header_b} bytes, expected "
            f"{code_b + scode_b + scale_b}"
        )
    codes = blob[header_b:header_b + code_b]
    s_codes = blob[header_b + code_b:header_b + code_b + scode_b]
    scales = _scales_from_bytes(blob[header_b + code_b + scode_b:], cfg.b2)
    n = rows * cols
    n_blocks = -(-n // cfg.B0)
    if not padding_is_zero(codes, cfg.b0, n) or not padding_is_zero(s_codes, cfg.b1, n_blocks):
        raise FormatError(f"{path}: nonzero padding bits")
    try:
        return QuantizedMatrix(rows, cols, cfg, codes, s_codes, scales)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
