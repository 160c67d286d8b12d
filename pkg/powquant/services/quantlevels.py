"""
QUANTLEVELS SERVICE - Power-of-two level sets and the quantization rule

This service owns the per-layer level set P_l = {±2^n1, ..., ±2^n2} ∪ {0}:
1. derive_level_set - n1 from the layer's max |w| (or a fixed max level), n2 from the bit width
2. quantize_value / quantize_array - map floats onto P_l ∪ {0}
3. encode / decode - sign + magnitude-index codes for packed storage

Code layout: a b-bit code is one sign bit plus a (b-1)-bit magnitude index.
Index 0 is zero, index i >= 1 is exponent n1 - (i - 1), so a level set holds
K = 2^(b-1) - 1 exponents. As an integer, code = (sign_bit << (b-1)) | index
with sign_bit = 1 for negative values.

Rounding follows half-open intervals [3*2^(p-2), 3*2^(p-1)) -> 2^p. Values at
or above 3*2^(n1-1) clamp to 2^n1; values below 3*2^(n2-2) become zero.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from powquant.utils import LevelSetError, QuantizationError, get_logger, validate_bit_width

logger = get_logger(__name__)


@dataclass(frozen=True)
class LevelSet:
    """Exponent bounds for one layer's quantized values."""

    bit_width: int
    n1: int
    n2: int

    def __post_init__(self):
        validate_bit_width(self.bit_width)
        if self.n2 > self.n1:
            raise LevelSetError(f"n2 ({self.n2}) must not exceed n1 ({self.n1})")
        if self.n1 - self.n2 + 1 != exponent_count(self.bit_width):
            raise LevelSetError(
                f"{self.n1 - self.n2 + 1} exponents do not fit a {self.bit_width}-bit code "
                f"(expected {exponent_count(self.bit_width)})"
            )

    @property
    def zero_threshold(self) -> float:
        """Magnitudes strictly below this quantize to zero."""
        return math.ldexp(3.0, self.n2 - 2)

    @property
    def clamp_threshold(self) -> float:
        """Magnitudes at or above this clamp to 2^n1."""
        return math.ldexp(3.0, self.n1 - 1)

    @property
    def max_index(self) -> int:
        return exponent_count(self.bit_width)

    def levels(self) -> List[float]:
        """P_l ∪ {0}, ascending."""
        positive = [math.ldexp(1.0, p) for p in range(self.n2, self.n1 + 1)]
        return sorted([-v for v in positive] + [0.0] + positive)


@dataclass(frozen=True)
class QuantCode:
    """Sign and magnitude index of one quantized value."""

    sign: int
    magnitude_index: int


def exponent_count(bit_width: int) -> int:
    """Number of exponents K a b-bit code can address."""
    return (1 << (bit_width - 1)) - 1


def derive_level_set(max_abs: float, bit_width: int, max_level_override: Optional[float] = None) -> LevelSet:
    """
    Build a layer's level set from its largest weight magnitude.

    n1 = floor(log2(4s/3)) so that s itself rounds to 2^n1; with an override
    n1 = log2(override), rounding the override down to a power of two first.
    n2 follows from the code budget: n2 = n1 - K + 1.
    """
    bit_width = validate_bit_width(bit_width)

    # STEP 1: Top exponent
    if max_level_override is not None:
        if not (max_level_override > 0 and math.isfinite(max_level_override)):
            raise LevelSetError(f"max level override must be a positive number, got {max_level_override}")
        mantissa, exp = math.frexp(max_level_override)
        n1 = exp - 1
        if mantissa != 0.5:
            logger.warning(
                f"max level override {max_level_override} is not a power of two; using {math.ldexp(1.0, n1)}"
            )
    else:
        if not math.isfinite(max_abs) or max_abs < 0:
            raise LevelSetError(f"max |w| must be a finite nonnegative number, got {max_abs}")
        if max_abs == 0:
            raise LevelSetError("degenerate level set: layer has no nonzero weights")
        n1 = _nearest_exponent(max_abs)

    # STEP 2: Bottom exponent from the code budget
    n2 = n1 - exponent_count(bit_width) + 1
    return LevelSet(bit_width=bit_width, n1=n1, n2=n2)


def _nearest_exponent(mag: float) -> int:
    # |w| = m * 2^e, m in [0.5, 1): 3*2^(e-2) <= |w| iff m >= 0.75
    m, e = math.frexp(mag)
    return e - (m < 0.75)


def quantize_value(w: float, ls: LevelSet) -> float:
    """Quantize one float onto P_l ∪ {0}."""
    if not math.isfinite(w):
        raise QuantizationError(f"cannot quantize non-finite value {w}")
    mag = abs(w)
    if mag == 0:
        return 0.0
    p = _nearest_exponent(mag)
    if p < ls.n2:
        return 0.0
    p = min(p, ls.n1)
    return math.copysign(math.ldexp(1.0, p), w)


def quantize_array(w: np.ndarray, ls: LevelSet) -> np.ndarray:
    """Vectorized quantize_value; returns an array of the input dtype."""
    w = np.asarray(w)
    work = w.astype(np.float64)
    if not np.all(np.isfinite(work)):
        raise QuantizationError("cannot quantize non-finite values")
    exps = quantized_exponents(work, ls)
    nonzero = exps >= ls.n2
    mag = np.where(nonzero, np.ldexp(1.0, np.where(nonzero, exps, 0).astype(np.int32)), 0.0)
    # zero stays +0.0 whatever the input sign, matching the canonical zero code
    out = np.where(nonzero & (work < 0), -mag, mag)
    return out.astype(w.dtype if w.dtype.kind == "f" else np.float64)


def quantized_exponents(w: np.ndarray, ls: LevelSet) -> np.ndarray:
    """
    Exponent p chosen for every element; n2 - 1 marks elements that quantize to zero.
    """
    mag = np.abs(np.asarray(w, dtype=np.float64))
    m, e = np.frexp(mag)
    exps = e.astype(np.int64) - (m < 0.75)
    exps = np.minimum(exps, ls.n1)
    exps = np.where((exps < ls.n2) | (mag == 0), ls.n2 - 1, exps)
    return exps


def encode(w_q: float, ls: LevelSet) -> QuantCode:
    """Code of a level value; raises LevelSetError for anything outside P_l ∪ {0}."""
    if w_q == 0.0:
        return QuantCode(sign=1, magnitude_index=0)
    if not math.isfinite(w_q):
        raise LevelSetError(f"not a level: {w_q}")
    mantissa, exp = math.frexp(abs(w_q))
    p = exp - 1
    if mantissa != 0.5 or not ls.n2 <= p <= ls.n1:
        raise LevelSetError(f"not a level: {w_q} is outside P_l for n1={ls.n1}, n2={ls.n2}")
    return QuantCode(sign=-1 if w_q < 0 else 1, magnitude_index=ls.n1 - p + 1)


def decode(c: QuantCode, ls: LevelSet) -> float:
    """Float value of a code."""
    if c.sign not in (1, -1) or not 0 <= c.magnitude_index <= ls.max_index:
        raise LevelSetError(f"invalid code {c} for a {ls.bit_width}-bit level set")
    if c.magnitude_index == 0:
        return 0.0
    return c.sign * math.ldexp(1.0, ls.n1 - (c.magnitude_index - 1))


def encode_array(w_q: np.ndarray, ls: LevelSet) -> np.ndarray:
    """Integer codes for an array of level values (uint32, flat order preserved)."""
    work = np.asarray(w_q, dtype=np.float64)
    mag = np.abs(work)
    mantissa, e = np.frexp(mag)
    p = e.astype(np.int64) - 1
    nonzero = mag != 0
    valid = ~nonzero | ((mantissa == 0.5) & (p >= ls.n2) & (p <= ls.n1))
    if not np.all(valid):
        bad = work[~valid].ravel()[0]
        raise LevelSetError(f"not a level: {bad} is outside P_l for n1={ls.n1}, n2={ls.n2}")
    index = np.where(nonzero, ls.n1 - p + 1, 0).astype(np.uint32)
    sign_bit = (nonzero & (work < 0)).astype(np.uint32)
    return (sign_bit << np.uint32(ls.bit_width - 1)) | index


def decode_array(codes: np.ndarray, ls: LevelSet, dtype=np.float32) -> np.ndarray:
    """Level values for an array of integer codes."""
    codes = np.asarray(codes, dtype=np.uint32)
    index, negative = split_codes(codes, ls)
    if np.any(index > ls.max_index):
        raise LevelSetError(f"code index out of range for a {ls.bit_width}-bit level set")
    nonzero = index != 0
    exps = np.where(nonzero, ls.n1 - (index.astype(np.int64) - 1), 0)
    mag = np.where(nonzero, np.ldexp(1.0, exps.astype(np.int32)), 0.0)
    return np.where(negative, -mag, mag).astype(dtype)


def split_codes(codes: np.ndarray, ls: LevelSet) -> Tuple[np.ndarray, np.ndarray]:
    """(magnitude index, is-negative) for integer codes."""
    codes = np.asarray(codes, dtype=np.uint32)
    index = codes & np.uint32((1 << (ls.bit_width - 1)) - 1)
    negative = (codes >> np.uint32(ls.bit_width - 1)) & np.uint32(1)
    return index, negative.astype(bool)


def code_exponents(codes: np.ndarray, ls: LevelSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(exponent, is-negative, is-zero) per code, for shift-add kernels."""
    index, negative = split_codes(codes, ls)
    zero = index == 0
    exps = np.where(zero, 0, ls.n1 - (index.astype(np.int64) - 1)).astype(np.int32)
    return exps, negative, zero
