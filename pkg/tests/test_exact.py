from fractions import Fraction

import numpy as np
from hypothesis import given, strategies as st

from hwtrigger import exact

finite64 = st.floats(-3e38, 3e38, allow_nan=False, allow_infinity=False)


@given(finite64)
def test_binary32_rounding_matches_hardware_cast(x):
    assert exact.round_to_format(Fraction(x), exact.BINARY32) == Fraction(float(np.float32(x)))


@given(st.floats(-6e4, 6e4, allow_nan=False, allow_infinity=False))
def test_binary16_rounding_matches_hardware_cast(x):
    assert exact.round_to_format(Fraction(x), exact.BINARY16) == Fraction(float(np.float16(x)))


def test_ties_go_to_even():
    one = Fraction(1)
    half_ulp = Fraction(1, 2 ** 24)
    assert exact.round_to_format(one + half_ulp) == one
    assert exact.round_to_format(one + 3 * half_ulp) == one + 4 * half_ulp


def test_subnormals_kept():
    tiny = Fraction(1, 2 ** 149)
    assert exact.round_to_format(tiny) == tiny
    assert exact.round_to_format(tiny / 2) == 0
    assert exact.round_to_format(tiny * 3 / 2) == 2 * tiny


def test_bfloat16_grid():
    assert exact.round_to_format(Fraction(1) + Fraction(1, 256), exact.BFLOAT16) == 1
    assert exact.round_to_format(Fraction(1) + Fraction(3, 256), exact.BFLOAT16) == Fraction(1) + Fraction(4, 256)


def test_overflow_raises():
    import pytest
    with pytest.raises(OverflowError):
        exact.round_to_format(Fraction(70000), exact.BINARY16)


def test_exact_matmul_small():
    assert exact.exact_matmul([[1, 2]], [[3], [4]]) == [[Fraction(11)]]
