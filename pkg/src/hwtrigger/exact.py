"""Exact rational reference arithmetic.

Used as an oracle for the order-controlled kernels: values are held as
:class:`fractions.Fraction`, each addition is exact, and rounding to a binary
format (round to nearest, ties to even, subnormals kept) is applied explicitly
wherever a profile says a rounding happens.  Nothing here touches numpy
arithmetic.
"""
from __future__ import annotations

import struct
from fractions import Fraction

from .numerics import Accumulator, BackendProfile, Tree

# (precision incl. hidden bit, emin, emax)
BINARY32 = (24, -126, 127)
BINARY64 = (53, -1022, 1023)
BINARY16 = (11, -14, 15)
BFLOAT16 = (8, -126, 127)


def _floor_log2(a: Fraction) -> int:
    e = a.numerator.bit_length() - a.denominator.bit_length()
    # 2**e <= a < 2**(e+1)
    if Fraction(2) ** e > a:
        e -= 1
    elif Fraction(2) ** (e + 1) <= a:
        e += 1
    return e


def round_to_format(q: Fraction, fmt=BINARY32) -> Fraction:
    """Round an exact rational to the nearest value of ``fmt`` (ties to even)."""
    prec, emin, emax = fmt
    if q == 0:
        return Fraction(0)
    sign = -1 if q < 0 else 1
    a = abs(q)
    e = max(_floor_log2(a), emin)
    quantum = Fraction(2) ** (e - prec + 1)
    n, r = divmod(a, quantum)
    n = int(n)
    if r * 2 > quantum or (r * 2 == quantum and n % 2 == 1):
        n += 1
    out = n * quantum
    if out >= Fraction(2) ** (emax + 1):
        raise OverflowError(f"{float(q)!r} overflows the target format")
    return sign * out


def f32_bits(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def to_float(q: Fraction) -> float:
    return float(q)  # exact for anything already rounded to binary32/64


def _acc_fmt(profile: BackendProfile):
    return BINARY64 if profile.accumulator is Accumulator.F64 else BINARY32


def _rotate(seq, profile, batch_size, batch_index):
    from .numerics import BatchTiling
    n = len(seq)
    if profile.batch_tiling is BatchTiling.PER_ROW or batch_size == 1:
        return list(seq), profile.block_size
    eff = max(1, profile.block_size // batch_size)
    off = (batch_index * eff) % n
    return list(seq[off:]) + list(seq[:off]), eff


def oracle_reduce(leaves, profile: BackendProfile, raw=None, batch_size=1, batch_index=0) -> Fraction:
    """Profile-ordered sum of exact rational leaves with explicit roundings.

    ``raw[i]`` marks leaf ``i`` as an unrounded product (fused into whichever
    addition consumes it); other leaves are taken to be exact already.
    """
    fmt = _acc_fmt(profile)
    leaves = [Fraction(v) for v in leaves]
    if raw is None:
        raw = [False] * len(leaves)
    items, block = _rotate(list(zip(leaves, raw)), profile, batch_size, batch_index)
    if not items:
        return Fraction(0)

    def rnd(item):
        v, is_raw = item
        return (round_to_format(v, fmt), False) if is_raw else (v, False)

    def add(acc, item):
        return (round_to_format(rnd(acc)[0] + item[0], fmt), False)

    def seq(xs):
        acc = rnd(xs[0])
        for it in xs[1:]:
            acc = add(acc, it)
        return acc

    def pw(xs):
        if len(xs) == 1:
            return xs[0]
        h = (len(xs) + 1) // 2
        return add(rnd(pw(xs[:h])), pw(xs[h:]))

    if profile.tree is Tree.SEQUENTIAL:
        acc = seq(items)
    elif profile.tree is Tree.PAIRWISE:
        acc = rnd(pw(items))
    else:
        parts = [seq(items[i: i + block]) for i in range(0, len(items), block)]
        acc = seq(parts)
    return round_to_format(acc[0], BINARY32)


def oracle_sum(values, profile: BackendProfile) -> Fraction:
    """Exact-arithmetic reference for :func:`hwtrigger.numerics.reduce_sum`."""
    return oracle_reduce([Fraction(float(v)) for v in values], profile)


def oracle_dot(a, b, profile: BackendProfile, batch_size=1, batch_index=0) -> Fraction:
    """Reference for one gemm output element: sum of a[t]*b[t] in profile order."""
    prods = [Fraction(float(x)) * Fraction(float(y)) for x, y in zip(a, b)]
    fused = profile.fma and profile.accumulator is Accumulator.F32
    if fused:
        raw = [True] * len(prods)
    else:
        prods = [round_to_format(p, _acc_fmt(profile)) for p in prods]
        raw = None
    return oracle_reduce(prods, profile, raw, batch_size, batch_index)


def exact_matmul(a, b):
    """Exact rational product of two nested-list/array matrices."""
    a = [[Fraction(float(x)) for x in row] for row in a]
    b = [[Fraction(float(x)) for x in row] for row in b]
    k = len(b)
    return [[sum((a[i][t] * b[t][j] for t in range(k)), Fraction(0)) for j in range(len(b[0]))]
            for i in range(len(a))]
