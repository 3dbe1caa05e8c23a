"""Bit-exact codecs for the numeric formats that parameters are stored in.

Every parameter lives in memory as a raw code word.  The helpers here turn
code words into real values (and back) for two's-complement integers,
sign/exponent/mantissa floats, 1-bit binary weights and LUT truth tables.
Scalar functions work on :class:`BitWord`; the ``*_codes`` variants are the
vectorized equivalents operating on ``uint64`` arrays and are what the
simulator uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

MAX_WIDTH = 64

IEEE = "ieee"
EXTENDED = "extended"
SPECIALS_MODES = (IEEE, EXTENDED)


def _width_mask(width: int) -> int:
    return (1 << width) - 1


@dataclass(frozen=True)
class BitWord:
    """A stored word: ``code`` holds the bits, bit 0 is least significant."""

    code: int
    width: int

    def __post_init__(self):
        if not 1 <= self.width <= MAX_WIDTH:
            raise ValueError(f"width must be in 1..{MAX_WIDTH}, got {self.width}")
        if not 0 <= self.code <= _width_mask(self.width):
            raise ValueError(f"code {self.code:#x} does not fit in {self.width} bits")

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "BitWord":
        """Build a word from digits listed least-significant first."""
        code = 0
        for k, b in enumerate(bits):
            if b not in (0, 1):
                raise ValueError(f"bit {k} is {b!r}, expected 0 or 1")
            code |= int(b) << k
        return cls(code, len(bits))

    @classmethod
    def from_string(cls, s: str) -> "BitWord":
        """Parse an MSB-first binary literal such as ``"110"``."""
        return cls.from_bits([int(c) for c in reversed(s)])

    @property
    def bits(self) -> tuple:
        return tuple((self.code >> k) & 1 for k in range(self.width))

    def __str__(self) -> str:
        return format(self.code, f"0{self.width}b")

    def __xor__(self, other: "BitWord") -> "BitWord":
        _check_same_width(self, other)
        return BitWord(self.code ^ other.code, self.width)

    def popcount(self) -> int:
        return bin(self.code).count("1")


def _check_same_width(a: BitWord, b: BitWord):
    if a.width != b.width:
        raise ValueError(f"width mismatch: {a.width} vs {b.width}")


# ---------------------------------------------------------------------------
# Formats
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntFormat:
    """Two's-complement integer of ``bits`` bits."""

    bits: int

    def __post_init__(self):
        if not 1 <= self.bits <= 32:
            raise ValueError(f"integer width must be in 1..32, got {self.bits}")

    @property
    def width(self) -> int:
        return self.bits

    @property
    def min_value(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def max_value(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def tag(self) -> str:
        return f"int{self.bits}"


@dataclass(frozen=True)
class FloatFormat:
    """Sign / exponent / mantissa float.

    ``specials="ieee"`` reserves the all-ones exponent for Inf/NaN and decodes
    the zero exponent as subnormal.  ``specials="extended"`` decodes every
    pattern as ``(-1)^s * 1.f * 2^(e - bias)``, so all patterns are finite and
    the sign, mantissa and exponent fields are independent factors of the
    value.
    """

    exponent_bits: int
    mantissa_bits: int
    bias: int = None
    specials: str = IEEE

    def __post_init__(self):
        if self.bias is None:
            object.__setattr__(self, "bias", (1 << (self.exponent_bits - 1)) - 1)
        if self.specials not in SPECIALS_MODES:
            raise ValueError(f"specials must be one of {SPECIALS_MODES}")
        if self.exponent_bits < 1 or self.mantissa_bits < 0:
            raise ValueError("need at least one exponent bit")
        if self.width > MAX_WIDTH:
            raise ValueError(f"total width {self.width} exceeds {MAX_WIDTH}")
        # every pattern must decode exactly in float64
        if self.mantissa_bits > 52:
            raise ValueError("mantissa wider than 52 bits cannot decode exactly")
        lo = -self.bias if self.specials == EXTENDED else 1 - self.bias
        if lo < -1022 or self.max_exponent_field - self.bias > 1023:
            raise ValueError("exponent range exceeds float64")
        if self.specials == IEEE and self.exponent_bits < 2:
            raise ValueError("ieee mode needs at least two exponent bits")

    @property
    def width(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def max_exponent_field(self) -> int:
        """Largest exponent field that encodes a finite value."""
        top = (1 << self.exponent_bits) - 1
        return top if self.specials == EXTENDED else top - 1

    @property
    def max_finite(self) -> float:
        return math.ldexp(2.0 - 2.0 ** -self.mantissa_bits, self.max_exponent_field - self.bias)

    @property
    def tag(self) -> str:
        return f"e{self.exponent_bits}m{self.mantissa_bits}b{self.bias}{'x' if self.specials == EXTENDED else ''}"

    def with_specials(self, specials: str) -> "FloatFormat":
        return FloatFormat(self.exponent_bits, self.mantissa_bits, self.bias, specials)


@dataclass(frozen=True)
class BinaryFormat:
    """One stored bit per weight: 0 decodes to -1, 1 to +1."""

    @property
    def width(self) -> int:
        return 1

    @property
    def tag(self) -> str:
        return "binary"


FP32 = FloatFormat(8, 23)
FP16 = FloatFormat(5, 10)
FP8 = FloatFormat(4, 3)
INT8 = IntFormat(8)
BINARY = BinaryFormat()

NumericFormat = Union[IntFormat, FloatFormat, BinaryFormat]


def format_from_tag(tag: str) -> NumericFormat:
    """Inverse of the ``tag`` property of each format."""
    if tag == "binary":
        return BINARY
    if tag.startswith("int"):
        return IntFormat(int(tag[3:]))
    if tag.startswith("e"):
        extended = tag.endswith("x")
        body = tag[1:-1] if extended else tag[1:]
        e, rest = body.split("m")
        m, b = rest.split("b")
        return FloatFormat(int(e), int(m), int(b), EXTENDED if extended else IEEE)
    raise ValueError(f"unknown format tag {tag!r}")


# ---------------------------------------------------------------------------
# Integers
# ---------------------------------------------------------------------------


def place_values(fmt: IntFormat) -> list:
    """Signed place value of each bit, least significant first."""
    vals = [1 << k for k in range(fmt.bits - 1)]
    vals.append(-(1 << (fmt.bits - 1)))
    return vals


def encode_int(value: int, fmt: IntFormat) -> BitWord:
    if not fmt.min_value <= value <= fmt.max_value:
        raise ValueError(
            f"{value} not representable in {fmt.bits}-bit two's complement "
            f"[{fmt.min_value}, {fmt.max_value}]"
        )
    return BitWord(int(value) & _width_mask(fmt.bits), fmt.bits)


def decode_int(word: BitWord, fmt: IntFormat) -> int:
    if word.width != fmt.bits:
        raise ValueError(f"width mismatch: word has {word.width} bits, format {fmt.bits}")
    code = word.code
    if code >> (fmt.bits - 1):
        code -= 1 << fmt.bits
    return code


def encode_int_codes(values, fmt: IntFormat) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    if v.size and (v.min() < fmt.min_value or v.max() > fmt.max_value):
        raise ValueError(
            f"values outside [{fmt.min_value}, {fmt.max_value}] for {fmt.bits}-bit integers"
        )
    return (v & _width_mask(fmt.bits)).astype(np.uint64)


def decode_int_codes(codes, fmt: IntFormat) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint64).astype(np.int64)
    return np.where(c >> (fmt.bits - 1) == 1, c - (1 << fmt.bits), c)


# ---------------------------------------------------------------------------
# Floats
# ---------------------------------------------------------------------------


def decode_float_codes(codes, fmt: FloatFormat) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint64)
    m = fmt.mantissa_bits
    frac = (c & np.uint64(_width_mask(m))).astype(np.float64) * 2.0 ** -m
    efield = ((c >> np.uint64(m)) & np.uint64(_width_mask(fmt.exponent_bits))).astype(np.int64)
    negative = ((c >> np.uint64(m + fmt.exponent_bits)) & np.uint64(1)).astype(bool)
    if fmt.specials == EXTENDED:
        mag = np.ldexp(1.0 + frac, efield - fmt.bias)
    else:
        top = (1 << fmt.exponent_bits) - 1
        mag = np.where(
            efield == 0,
            np.ldexp(frac, 1 - fmt.bias),
            np.ldexp(1.0 + frac, efield - fmt.bias),
        )
        mag = np.where(efield == top, np.where(frac == 0, np.inf, np.nan), mag)
    return np.where(negative, -mag, mag)


def decode_float(word: BitWord, fmt: FloatFormat) -> float:
    """Decode one word; specials come back as ``inf``, ``-inf`` or ``nan``."""
    if word.width != fmt.width:
        raise ValueError(f"width mismatch: word has {word.width} bits, format {fmt.width}")
    return float(decode_float_codes(np.array([word.code], dtype=np.uint64), fmt)[0])


def encode_float_codes(values, fmt: FloatFormat) -> np.ndarray:
    """Round-to-nearest-even encode; overflow saturates to the largest finite."""
    v = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot encode non-finite values")
    m, bias = fmt.mantissa_bits, fmt.bias
    a = np.abs(v)
    _, ex = np.frexp(a)
    unbiased = ex.astype(np.int64) - 1
    # clip before shifting so saturation cannot overflow int64
    field = np.minimum(unbiased + bias, fmt.max_exponent_field + 1)
    with np.errstate(over="ignore", invalid="ignore"):
        q = np.rint(np.ldexp(a, m - (field - bias)))
        q = np.where(np.isfinite(q), q, 0).astype(np.int64)
        code = field * (1 << m) + q - (1 << m)  # a rounding carry bumps the exponent
        if fmt.specials == IEEE:
            sub = np.rint(np.ldexp(a, bias - 1 + m))
            sub = np.where(field < 1, sub, 0).astype(np.int64)
            code = np.where(field < 1, sub, code)
        else:
            code = np.where(field < 0, 0, code)
    code = np.where(a == 0, 0, code)
    max_code = (fmt.max_exponent_field << m) | _width_mask(m)
    code = np.minimum(code, max_code).astype(np.uint64)
    sign = np.signbit(v).astype(np.uint64) << np.uint64(m + fmt.exponent_bits)
    return (code | sign).reshape(np.shape(values))


def encode_float(value: float, fmt: FloatFormat) -> BitWord:
    code = encode_float_codes(np.array([value]), fmt)[0]
    return BitWord(int(code), fmt.width)


# ---------------------------------------------------------------------------
# Binary weights
# ---------------------------------------------------------------------------


def decode_binary(bit: int) -> int:
    if bit not in (0, 1):
        raise ValueError(f"binary weight bit must be 0 or 1, got {bit!r}")
    return 2 * bit - 1


def encode_binary(weight: int) -> int:
    if weight not in (-1, 1):
        raise ValueError(f"binary weight must be -1 or +1, got {weight!r}")
    return (weight + 1) // 2


def decode_binary_codes(codes) -> np.ndarray:
    return 2.0 * (np.asarray(codes, dtype=np.uint64) & np.uint64(1)).astype(np.float64) - 1.0


# ---------------------------------------------------------------------------
# Generic dispatch
# ---------------------------------------------------------------------------


def decode_codes(codes, fmt: NumericFormat) -> np.ndarray:
    """Decode an array of codes to float64 under any weight format."""
    if isinstance(fmt, IntFormat):
        return decode_int_codes(codes, fmt).astype(np.float64)
    if isinstance(fmt, FloatFormat):
        return decode_float_codes(codes, fmt)
    if isinstance(fmt, BinaryFormat):
        return decode_binary_codes(codes)
    raise TypeError(f"unsupported format {fmt!r}")


def decode(word: BitWord, fmt: NumericFormat) -> float:
    if word.width != fmt.width:
        raise ValueError(f"width mismatch: word has {word.width} bits, format {fmt.width}")
    return float(decode_codes(np.array([word.code], dtype=np.uint64), fmt)[0])


# ---------------------------------------------------------------------------
# Composite parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineQuantLayerParams:
    """Shared per-layer scale and zero-point for ``w_hat = S * (w - Z)``."""

    scale_word: BitWord
    scale_format: FloatFormat
    zero_point_word: BitWord
    zero_point_format: IntFormat
    weight_format: IntFormat

    def __post_init__(self):
        if self.scale_word.width != self.scale_format.width:
            raise ValueError("scale word width does not match its format")
        if self.zero_point_word.width != self.zero_point_format.bits:
            raise ValueError("zero-point word width does not match its format")

    @property
    def scale(self) -> float:
        return decode_float(self.scale_word, self.scale_format)

    @property
    def zero_point(self) -> int:
        return decode_int(self.zero_point_word, self.zero_point_format)

    @classmethod
    def from_values(cls, scale: float, zero_point: int, weight_format: IntFormat,
                    scale_format: FloatFormat = FP32,
                    zero_point_format: IntFormat = None) -> "AffineQuantLayerParams":
        zfmt = zero_point_format or weight_format
        return cls(encode_float(scale, scale_format), scale_format,
                   encode_int(zero_point, zfmt), zfmt, weight_format)


@dataclass(frozen=True)
class LutTable:
    """A ``2**k``-entry truth table; entry ``a`` is bit ``a`` of ``entries``."""

    k: int
    entries: BitWord

    def __post_init__(self):
        if not 1 <= self.k <= 6:
            raise ValueError(f"fan-in must be in 1..6, got {self.k}")
        if self.entries.width != 1 << self.k:
            raise ValueError(f"table for k={self.k} needs {1 << self.k} entries")

    @property
    def size(self) -> int:
        return 1 << self.k

    def __getitem__(self, address: int) -> int:
        return (self.entries.code >> address) & 1

    def as_array(self) -> np.ndarray:
        return np.array(self.entries.bits, dtype=np.uint8)

    @classmethod
    def from_array(cls, values: Iterable[int]) -> "LutTable":
        values = [int(v) for v in values]
        k = int(math.log2(len(values)))
        return cls(k, BitWord.from_bits(values))
