from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hwtrigger import exact
from hwtrigger import numerics as nx
from hwtrigger.numerics import Accumulator, BackendProfile, BatchTiling, Tree

ALL = [nx.get_profile(n) for n in sorted(nx.PROFILES)]
F32 = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=32)


def f32(x):
    return np.float32(x)


def bits(x):
    return np.asarray(x, np.float32).view(np.uint32)


def test_cancellation_depends_on_order():
    v = [1e8, 1.0, -1e8]
    seq = nx.get_profile("seq32")
    assert nx.reduce_sum(v, seq) == 0.0
    assert exact.oracle_sum(v, seq) == 0
    # blocks of two over the reordered sequence: (1e8 + -1e8) + 1
    blk2 = BackendProfile("blk2", Tree.BLOCKED, 2)
    reordered = [1e8, -1e8, 1.0]
    assert nx.reduce_sum(reordered, blk2) == 1.0
    assert exact.oracle_sum(reordered, blk2) == 1


@pytest.mark.parametrize("p", ALL, ids=lambda p: p.name)
def test_powers_of_two_exact_everywhere(p):
    assert nx.reduce_sum([0.5, 0.25, 0.25], p) == 1.0


def test_f64_accumulator_rounds_once():
    p = nx.CANONICAL
    v = np.float32([0.1, 0.2, 0.3, 1e-3, 7.0])
    exact_sum = sum(Fraction(float(x)) for x in v)
    assert Fraction(float(nx.reduce_sum(v, p))) == exact.round_to_format(exact_sum)


@pytest.mark.parametrize("p", ALL, ids=lambda p: p.name)
@given(st.lists(F32, min_size=1, max_size=40))
def test_reduce_sum_matches_oracle(p, values):
    got = nx.reduce_sum(values, p)
    assert Fraction(float(got)) == exact.oracle_sum(values, p)


@given(st.lists(F32, min_size=1, max_size=64), st.sampled_from(ALL), st.sampled_from(ALL))
def test_profile_difference_within_recursive_bound(values, p1, p2):
    v = np.float32(values)
    bound = 2 * len(v) * 2.0 ** -24 * float(np.sum(np.abs(v.astype(np.float64))))
    assert abs(float(nx.reduce_sum(v, p1)) - float(nx.reduce_sum(v, p2))) <= bound


@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=64), st.sampled_from(ALL))
def test_small_integers_exact(values, p):
    assert nx.reduce_sum(values, p) == sum(values)


def test_f64_profiles_agree_with_oracle_long_sequences(rng):
    for n in (10, 100, 1000):
        v = rng.uniform(-1, 1, n).astype(np.float32)
        exact_sum = sum(Fraction(float(x)) for x in v)
        assert Fraction(float(nx.reduce_sum(v, nx.CANONICAL))) == exact.round_to_format(exact_sum)


def test_blocked_wide_block_is_sequential(rng):
    v = rng.standard_normal(37).astype(np.float32)
    blk = BackendProfile("wide", Tree.BLOCKED, 64)
    assert bits(nx.reduce_sum(v, blk)) == bits(nx.reduce_sum(v, nx.get_profile("seq32")))


def test_overflow_names_kernel():
    big = np.float32(3e38)
    with pytest.raises(nx.KernelOverflowError, match="reduce_sum"):
        nx.reduce_sum([big, big], nx.get_profile("seq32"))
    with pytest.raises(nx.KernelOverflowError, match="gemm"):
        nx.gemm(np.full((1, 2), big, np.float32), np.ones((2, 1), np.float32), nx.get_profile("seq32"))


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        nx.reduce_sum([1.0, np.nan], nx.CANONICAL)


def test_invalid_block_size():
    with pytest.raises(ValueError):
        BackendProfile("bad", Tree.BLOCKED, 0)


# ---------------------------------------------------------------- gemm


@pytest.mark.parametrize("p", ALL, ids=lambda p: p.name)
def test_identity_gemm_is_copy(p, rng):
    a = rng.standard_normal((7, 7)).astype(np.float32)
    assert np.array_equal(bits(nx.gemm(np.eye(7, dtype=np.float32), a, p)), bits(a))


@pytest.mark.parametrize("p", ALL, ids=lambda p: p.name)
def test_integer_gemm_exact(p):
    a = np.float32([[1, 2], [3, 4]])
    b = np.float32([[5, 6], [7, 8]])
    assert np.array_equal(nx.gemm(a, b, p), a @ b)


def test_gemm_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.gemm(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32), nx.CANONICAL)


@given(st.integers(1, 6), st.integers(1, 20), st.integers(1, 4), st.sampled_from(ALL), st.integers(0, 2 ** 31))
def test_gemm_elements_match_oracle(m, k, n, p, seed):
    r = np.random.default_rng(seed)
    a = (r.standard_normal((m, k)) * r.choice([1e-3, 1, 1e3], (m, k))).astype(np.float32)
    b = r.standard_normal((k, n)).astype(np.float32)
    out = nx.gemm(a, b, p)
    for i in range(m):
        for j in range(n):
            assert Fraction(float(out[i, j])) == exact.oracle_dot(a[i], b[:, j], p)


@given(st.integers(1, 5), st.integers(0, 4), st.integers(2, 30), st.integers(0, 2 ** 31))
def test_interleaved_tiling_matches_oracle(batch, slot, k, seed):
    slot = slot % batch
    r = np.random.default_rng(seed)
    a = r.standard_normal((1, k)).astype(np.float32)
    b = r.standard_normal((k, 1)).astype(np.float32)
    p = nx.get_profile("blk8fma")
    out = nx.gemm(a, b, p, batch_size=batch, batch_index=slot)
    assert Fraction(float(out[0, 0])) == exact.oracle_dot(a[0], b[:, 0], p, batch, slot)


def test_fma_double_rounding_case():
    # the fused sum must round once; rounding the product to f32 first gives a different answer
    a = np.float32([1 + 2 ** -23, 2 ** -12 * (1 + 2 ** -18)])
    b = np.float32([1, 2 ** -12 * (1 - 2 ** -18)])
    p = BackendProfile("seqfma", Tree.SEQUENTIAL, 1, True)
    got = nx.gemm(a[None], b[:, None], p)[0, 0]
    assert Fraction(float(got)) == exact.oracle_dot(a, b, p)
    assert got == np.float32(1 + 2 ** -23)


def test_per_row_tiling_ignores_batch(rng):
    a = rng.standard_normal((3, 40)).astype(np.float32)
    b = rng.standard_normal((40, 2)).astype(np.float32)
    p = nx.get_profile("blk16")
    base = nx.gemm(a, b, p)
    for k in (2, 4, 8):
        for i in range(k):
            assert np.array_equal(bits(nx.gemm(a, b, p, k, i)), bits(base))


def test_batch_size_one_matches_per_row(rng):
    a = rng.standard_normal((3, 40)).astype(np.float32)
    b = rng.standard_normal((40, 2)).astype(np.float32)
    inter = nx.get_profile("blk4")
    per_row = BackendProfile("blk4-rows", Tree.BLOCKED, 4, batch_tiling=BatchTiling.PER_ROW)
    assert np.array_equal(bits(nx.gemm(a, b, inter, 1, 0)), bits(nx.gemm(a, b, per_row)))


@pytest.mark.parametrize("p", ALL, ids=lambda p: p.name)
def test_determinism(p, rng):
    a = rng.standard_normal((9, 33)).astype(np.float32)
    b = rng.standard_normal((33, 5)).astype(np.float32)
    assert np.array_equal(bits(nx.gemm(a, b, p)), bits(nx.gemm(a.copy(), b.copy(), p)))


def test_bit_identical_twin():
    a, b = nx.get_profile("blk8fma"), nx.get_profile("blk8fma-virt")
    assert a.name != b.name and a.bit_identical_to(b)


def test_profile_dict_round_trip():
    for p in ALL:
        q = BackendProfile.from_dict(p.to_dict())
        assert q == p


# ---------------------------------------------------------------- conv2d


@pytest.mark.parametrize("p", ALL, ids=lambda p: p.name)
def test_conv_identity_and_zero(p, rng):
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    ident = np.zeros((3, 3, 1, 1), np.float32)
    ident[np.arange(3), np.arange(3)] = 1
    assert np.array_equal(bits(nx.conv2d(x, ident, p)), bits(x))
    zero = nx.conv2d(x, np.zeros((4, 3, 3, 3), np.float32), p, padding=1)
    assert np.all(bits(zero) == 0)


def test_conv_ones_kernel_differs_across_block_sizes():
    x = np.full((1, 1, 6, 6), 0.01, np.float32)
    k = np.ones((1, 1, 3, 3), np.float32)
    results = {}
    for name in ("seq32", "pair32", "blk4"):
        p = nx.get_profile(name)
        out = nx.conv2d(x, k, p)
        centre = float(out[0, 0, 2, 2])
        leaves = [Fraction(float(np.float32(0.01)))] * 9
        assert Fraction(centre) == exact.oracle_reduce(leaves, p)
        results[name] = centre
    assert len(set(results.values())) >= 2


def test_conv_matches_float64_reference(rng):
    x = rng.standard_normal((2, 2, 6, 6)).astype(np.float32)
    k = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    out = nx.conv2d(x, k, nx.CANONICAL, stride=2, padding=1)
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 3, 3))
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, 2 * i: 2 * i + 3, 2 * j: 2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, k.astype(np.float64))
    assert np.allclose(out, ref, rtol=1e-6, atol=1e-6)


def test_conv_shape_errors():
    with pytest.raises(nx.ShapeError):
        nx.conv2d(np.ones((1, 2, 4, 4), np.float32), np.ones((1, 3, 3, 3), np.float32), nx.CANONICAL)
    with pytest.raises(nx.ShapeError):
        nx.conv2d(np.ones((1, 1, 2, 2), np.float32), np.ones((1, 1, 3, 3), np.float32), nx.CANONICAL)


# ---------------------------------------------------------------- frobenius


def test_frobenius_n1_identical():
    vals = nx.frobenius_demo(1, 0.37, ALL)
    expected = np.float32(np.float64(np.float32(0.37)) ** 2)
    assert all(v == expected for v in vals.values())


def test_frobenius_seq_vs_pairwise_match_oracle():
    n, fill = 100, np.float32(0.01)
    vals = nx.frobenius_demo(n, fill, ["seq32", "pair32"])
    assert vals["seq32"] != vals["pair32"]
    for name in ("seq32", "pair32"):
        p = nx.get_profile(name)
        q = Fraction(float(fill))
        diag = exact.oracle_dot([fill] * n, [fill] * n, p)
        assert Fraction(float(vals[name])) == exact.oracle_reduce([diag] * n, p)
        assert abs(float(vals[name]) - 1.0) <= 2 * n * n * 2.0 ** -24
        assert q * q * n * n != 1  # float 0.01 is not 1/100
