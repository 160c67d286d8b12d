"""
Unit tests for power-of-two level sets, quantization and codes.
"""

import math

import numpy as np
import pytest

from powquant.services.quantlevels import (
    LevelSet,
    QuantCode,
    decode,
    decode_array,
    derive_level_set,
    encode,
    encode_array,
    exponent_count,
    quantize_array,
    quantize_value,
)
from powquant.utils import LevelSetError, QuantizationError


def interval_oracle(w: np.ndarray, ls: LevelSet) -> np.ndarray:
    """Scan every half-open interval [3*2^(p-2), 3*2^(p-1)) explicitly."""
    mag = np.abs(w.astype(np.float64))
    out = np.zeros_like(mag)
    nonzero = mag[mag > 0]
    # intervals below the smallest input are empty; skip them for wide codes
    start = ls.n2 if not nonzero.size else max(ls.n2, int(np.floor(np.log2(nonzero.min()))) - 2)
    for p in range(start, ls.n1 + 1):
        lo = math.ldexp(3.0, p - 2)
        hi = np.inf if p == ls.n1 else math.ldexp(3.0, p - 1)
        out[(mag >= lo) & (mag < hi)] = math.ldexp(1.0, p)
    return np.where(w < 0, -out, out)


class TestDeriveLevelSet:
    """Test level set derivation."""

    def test_max_abs_point_nine_three_bits(self):
        """Test s=0.9, b=3 gives n1=0, n2=-2."""
        ls = derive_level_set(0.9, 3)
        assert (ls.n1, ls.n2) == (0, -2)
        assert ls.levels() == [-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0]

    def test_max_abs_one_two_bits(self):
        """Test s=1.0, b=2 gives a single exponent."""
        ls = derive_level_set(1.0, 2)
        assert (ls.n1, ls.n2) == (0, 0)

    def test_max_level_override(self):
        """Test a fixed max level of 4 at 5 bits gives n1=2, n2=-12."""
        ls = derive_level_set(123.0, 5, max_level_override=4.0)
        assert (ls.n1, ls.n2) == (2, -12)

    def test_max_abs_rounds_to_top_level(self):
        """Test the layer maximum itself quantizes to 2^n1."""
        for s in [0.01, 0.3, 0.75, 0.76, 1.49, 1.5, 2.9, 17.0]:
            ls = derive_level_set(s, 5)
            assert quantize_value(s, ls) == 2.0 ** ls.n1

    def test_exponent_count(self):
        """Test K = 2^(b-1) - 1."""
        assert [exponent_count(b) for b in (2, 3, 4, 5)] == [1, 3, 7, 15]

    def test_degenerate_layer(self):
        """Test an all-zero layer raises error."""
        with pytest.raises(LevelSetError, match="degenerate"):
            derive_level_set(0.0, 4)

    def test_invalid_bit_width(self):
        """Test bit widths outside the range raise error."""
        for bits in [0, 1, 17]:
            with pytest.raises(LevelSetError):
                derive_level_set(1.0, bits)

    def test_inconsistent_level_set(self):
        """Test exponent bounds must match the code budget."""
        with pytest.raises(LevelSetError):
            LevelSet(bit_width=3, n1=0, n2=-5)


class TestQuantize:
    """Test the quantization rule."""

    @pytest.fixture
    def ls(self):
        return LevelSet(bit_width=3, n1=0, n2=-2)

    def test_examples(self, ls):
        """Test 0.3 -> 0.25, -7 -> -1 (clamped), 0.05 -> 0."""
        assert quantize_value(0.3, ls) == 0.25
        assert quantize_value(-7.0, ls) == -1.0
        assert quantize_value(0.05, ls) == 0.0

    def test_interval_boundaries(self, ls):
        """Test lower interval bounds are inclusive."""
        assert quantize_value(0.1875, ls) == 0.25
        assert quantize_value(np.nextafter(0.1875, 0), ls) == 0.0
        assert quantize_value(0.375, ls) == 0.5
        assert quantize_value(np.nextafter(0.375, 0), ls) == 0.25
        assert quantize_value(0.75, ls) == 1.0

    def test_matches_interval_oracle(self):
        """Test a million random values against an explicit interval scan."""
        rng = np.random.default_rng(0)
        ls = derive_level_set(2.0, 5)
        w = rng.normal(0.0, 0.5, size=1_000_000) * np.exp2(rng.integers(-12, 3, size=1_000_000))
        np.testing.assert_array_equal(quantize_array(w, ls), interval_oracle(w, ls))

    @pytest.mark.parametrize("seed", range(20))
    def test_random_level_sets_match_oracle(self, seed):
        """Test random values against the interval scan for random level sets of every width."""
        rng = np.random.default_rng([seed, 17])
        bits = int(rng.integers(2, 17))
        ls = derive_level_set(float(np.exp2(rng.uniform(-20, 20))), bits)
        low = max(ls.n2, -1000) - 3
        exps = rng.integers(low, ls.n1 + 4, size=50_000)
        signs = rng.choice([-1.0, 1.0], size=exps.size)
        w = signs * rng.uniform(0.5, 1.0, size=exps.size) * np.exp2(exps.astype(np.float64))
        np.testing.assert_array_equal(quantize_array(w, ls), interval_oracle(w, ls))

    def test_subnormal_inputs(self):
        """Test the tiniest magnitudes stay in range and keep the order for wide codes."""
        ls = derive_level_set(1.0, 16)
        assert (ls.n1, ls.n2) == (0, -32766)
        assert quantize_value(5e-324, ls) == 5e-324
        w = np.array([0.0, 5e-324, 1e-320, 1e-310, 1e-300, 0.5, 1.0, 3.0])
        q = np.array([quantize_value(float(v), ls) for v in w])
        assert np.all(np.diff(q) >= 0)
        assert q.max() == 1.0
        np.testing.assert_array_equal(quantize_array(w, ls), q)

    def test_subnormal_max_level(self):
        """Test a subnormal largest weight still rounds to itself."""
        ls = derive_level_set(5e-324, 2)
        assert ls.n1 == -1074
        assert quantize_value(5e-324, ls) == 5e-324
        assert derive_level_set(math.ldexp(3.0, -1070), 3).n1 == -1068

    def test_array_matches_scalar(self, ls, rng):
        """Test the vectorized rule agrees with the scalar rule."""
        w = rng.uniform(-2, 2, size=500)
        expected = np.array([quantize_value(float(v), ls) for v in w])
        np.testing.assert_array_equal(quantize_array(w, ls), expected)

    def test_idempotent(self, rng):
        """Test quantizing a quantized value is a no-op."""
        ls = derive_level_set(1.0, 4)
        q = quantize_array(rng.normal(size=1000), ls)
        np.testing.assert_array_equal(quantize_array(q, ls), q)

    def test_sign_preserved(self, ls, rng):
        """Test nonzero outputs keep the input sign."""
        w = rng.uniform(-1, 1, size=1000)
        q = quantize_array(w, ls)
        nonzero = q != 0
        assert np.all(np.sign(q[nonzero]) == np.sign(w[nonzero]))

    def test_monotone(self, ls):
        """Test the rule is nondecreasing."""
        w = np.linspace(-3, 3, 10001)
        assert np.all(np.diff(quantize_array(w, ls)) >= 0)

    def test_outputs_are_levels(self, ls, rng):
        """Test every output lies in P_l or is zero."""
        q = quantize_array(rng.normal(size=1000), ls)
        assert set(np.unique(q)).issubset(set(ls.levels()))

    def test_preserves_float32(self, ls):
        """Test float32 input gives float32 output."""
        assert quantize_array(np.array([0.3], dtype=np.float32), ls).dtype == np.float32

    def test_non_finite(self, ls):
        """Test NaN and infinity are rejected."""
        with pytest.raises(QuantizationError):
            quantize_value(math.nan, ls)
        with pytest.raises(QuantizationError):
            quantize_array(np.array([1.0, np.inf]), ls)


class TestCodes:
    """Test sign + magnitude-index codes."""

    @pytest.fixture
    def ls(self):
        return LevelSet(bit_width=3, n1=0, n2=-2)

    def test_encode_examples(self, ls):
        """Test 0.25 -> (+1, 3) and -1 -> (-1, 1)."""
        assert encode(0.25, ls) == QuantCode(sign=1, magnitude_index=3)
        assert encode(-1.0, ls) == QuantCode(sign=-1, magnitude_index=1)

    def test_zero_code(self, ls):
        """Test zero uses index 0."""
        assert encode(0.0, ls).magnitude_index == 0
        assert decode(QuantCode(sign=1, magnitude_index=0), ls) == 0.0

    def test_not_a_level(self, ls):
        """Test values outside the level set raise error."""
        for bad in [0.3, 2.0, 0.125, -0.7]:
            with pytest.raises(LevelSetError, match="not a level"):
                encode(bad, ls)
        with pytest.raises(LevelSetError, match="not a level"):
            encode_array(np.array([0.25, 0.3]), ls)

    def test_bijection(self):
        """Test every level decodes back to itself and codes are distinct."""
        ls = derive_level_set(1.0, 5)
        levels = ls.levels()
        codes = [encode(v, ls) for v in levels]
        assert len(set(codes)) == len(levels)
        assert [decode(c, ls) for c in codes] == levels

    def test_integer_layout(self, ls):
        """Test integer codes put the sign bit above the index."""
        codes = encode_array(np.array([0.0, 0.25, -1.0, 1.0]), ls)
        assert codes.tolist() == [0, 3, 0b101, 1]
        np.testing.assert_array_equal(decode_array(codes, ls), [0.0, 0.25, -1.0, 1.0])

    def test_codes_fit_bit_width(self, rng):
        """Test codes never exceed b bits."""
        for bits in [2, 3, 4, 8]:
            ls = derive_level_set(1.0, bits)
            codes = encode_array(quantize_array(rng.normal(size=500), ls), ls)
            assert int(codes.max()) < 2 ** bits
