"""Order-controlled float32 kernels.

Every kernel result is a pure function of ``(inputs, BackendProfile)``.  A
profile pins down the complete rounding sequence of a reduction: the shape of
the accumulation tree, the block length, whether products are fused into the
accumulator, and the precision partial sums are held in.  Two profiles that
differ in any of those produce (in general) different low-order bits, which is
how this package stands in for different accelerators.

Reduction orders
----------------
``sequential``
    ``((t0 + t1) + t2) + ...``
``pairwise``
    balanced binary tree; a node over ``n`` leaves puts ``ceil(n/2)`` leaves
    on the left.
``blocked``
    the terms are cut into consecutive blocks of ``block_size`` (the last one
    may be short); every block is summed sequentially, then the block partials
    are summed sequentially.  ``block_size >= n`` is the same as sequential.

Fused multiply-add
------------------
With ``fma=True`` and an f32 accumulator, a product is never rounded on its
own: whenever it is added to a partial sum the exact ``partial + a*b`` is
rounded once.  The left operand of every addition is a rounded partial, so a
leaf that starts a chain is rounded when it enters the accumulator.  Without
fma every product is rounded to the accumulator precision first.  f32*f32
products are exact in f64, so under an f64 accumulator the flag has no effect.

Batch tiling
------------
With ``batch_tiling="interleaved"`` the batch takes part in tiling: a row in
slot ``r`` of a batch of ``B`` uses the effective block length
``e = max(1, block_size // B)`` and starts its reduction at term
``(r * e) mod n``, cycling through the rest.  For ``B == 1`` this is exactly
the per-row behaviour.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Tree",
    "Accumulator",
    "BatchTiling",
    "BackendProfile",
    "KernelOverflowError",
    "ShapeError",
    "PROFILES",
    "CANONICAL",
    "get_profile",
    "register_profile",
    "reduce_sum",
    "reduce_last",
    "gemm",
    "conv2d",
    "im2col",
    "frobenius_demo",
]

# rows handled per chunk inside gemm; rows are independent so this only bounds memory
_ROW_CHUNK = 2048


class Tree(str, enum.Enum):
    SEQUENTIAL = "sequential"
    PAIRWISE = "pairwise"
    BLOCKED = "blocked"


class Accumulator(str, enum.Enum):
    F32 = "f32"
    F64 = "f64"


class BatchTiling(str, enum.Enum):
    PER_ROW = "per_row"
    INTERLEAVED = "interleaved"


class KernelOverflowError(FloatingPointError):
    """A kernel produced a non-finite value."""

    def __init__(self, kernel: str, detail: str = ""):
        self.kernel = kernel
        msg = f"non-finite result in kernel '{kernel}'"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class BackendProfile:
    """A virtual hardware platform."""

    name: str
    tree: Tree = Tree.SEQUENTIAL
    block_size: int = 1
    fma: bool = False
    accumulator: Accumulator = Accumulator.F32
    batch_tiling: BatchTiling = BatchTiling.PER_ROW
    description: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tree", Tree(self.tree))
        object.__setattr__(self, "accumulator", Accumulator(self.accumulator))
        object.__setattr__(self, "batch_tiling", BatchTiling(self.batch_tiling))
        if int(self.block_size) != self.block_size or self.block_size < 1:
            raise ValueError(f"block_size must be a positive integer, got {self.block_size!r}")
        object.__setattr__(self, "block_size", int(self.block_size))

    @property
    def numerics(self) -> tuple:
        """Everything that influences rounding; equal tuples mean bit-identical kernels."""
        return (self.tree, self.block_size, self.fma, self.accumulator, self.batch_tiling)

    def bit_identical_to(self, other: "BackendProfile") -> bool:
        return self.numerics == other.numerics

    @property
    def fused(self) -> bool:
        return self.fma and self.accumulator is Accumulator.F32

    @property
    def acc_dtype(self):
        return np.float64 if self.accumulator is Accumulator.F64 else np.float32

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "tree": self.tree.value,
            "block_size": self.block_size,
            "fma": self.fma,
            "accumulator": self.accumulator.value,
            "batch_tiling": self.batch_tiling.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackendProfile":
        known = {"name", "tree", "block_size", "fma", "accumulator", "batch_tiling", "description"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown profile fields: {sorted(unknown)}")
        return cls(**d)


CANONICAL = BackendProfile(
    "canonical64", Tree.SEQUENTIAL, 1, False, Accumulator.F64,
    description="high-precision reference path; gradients are taken here",
)

PROFILES: dict[str, BackendProfile] = {}


def register_profile(profile: BackendProfile) -> BackendProfile:
    PROFILES[profile.name] = profile
    return profile


for _p in (
    CANONICAL,
    BackendProfile("seq32", Tree.SEQUENTIAL, 1, False, Accumulator.F32,
                   description="naive loop, separate multiply and add"),
    BackendProfile("pair32", Tree.PAIRWISE, 1, False, Accumulator.F32,
                   description="tree reduction"),
    BackendProfile("blk8fma", Tree.BLOCKED, 8, True, Accumulator.F32, BatchTiling.INTERLEAVED,
                   description="8-wide tiles with fused multiply-add, batch-tiled"),
    BackendProfile("blk8fma-virt", Tree.BLOCKED, 8, True, Accumulator.F32, BatchTiling.INTERLEAVED,
                   description="virtualised twin of blk8fma; numerically identical"),
    BackendProfile("blk4", Tree.BLOCKED, 4, False, Accumulator.F32, BatchTiling.INTERLEAVED,
                   description="4-wide tiles, separate multiply and add, batch-tiled"),
    BackendProfile("blk16", Tree.BLOCKED, 16, False, Accumulator.F32,
                   description="16-wide tiles"),
    BackendProfile("pair32fma", Tree.PAIRWISE, 1, True, Accumulator.F32,
                   description="tree reduction with fused products"),
):
    register_profile(_p)


def get_profile(name: str | BackendProfile) -> BackendProfile:
    if isinstance(name, BackendProfile):
        return name
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown profile {name!r}; known: {sorted(PROFILES)}") from None


# --------------------------------------------------------------------------
# reduction core


def _risky(s: np.ndarray) -> np.ndarray:
    b = s.view(np.int64)
    mag = b & 0x7FFFFFFFFFFFFFFF
    # exact f32 midpoint, or a nonzero |s| below 2**-125
    return ((b & 0x1FFFFFFF) == 0x10000000) | ((mag < 0x3820000000000000) & (mag != 0))


def _fused_round_f32(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Correctly rounded float32 of the exact sum of two float64 arrays.

    The f64 sum is rounded to odd (TwoSum supplies the sign of the residual),
    after which a single RNE cast to f32 is exact: 53 >= 24 + 2.
    """
    s = x + y
    # RN53 cannot step across an f32 rounding midpoint, only land on one, so the
    # plain cast is already correct unless s sits exactly on a midpoint (low 29
    # bits == 1 << 28) or in the f32 subnormal range where that pattern differs.
    risky = _risky(s)
    if risky.any():
        bb = s - x
        err = (x - (s - bb)) + (y - bb)
        fix = risky & (err != 0) & ((s.view(np.int64) & 1) == 0)
        if fix.any():
            s = np.where(fix, np.nextafter(s, np.where(err > 0, np.inf, -np.inf)), s)
    return s.astype(np.float32)


class _Reducer:
    """Applies one profile's rounding rules to leaves laid out on the last axis."""

    def __init__(self, profile: BackendProfile, raw: bool):
        self.p = profile
        # raw: leaves are exact f64 products that still need their single rounding
        self.raw = raw and profile.fused

    def round(self, x):
        if self.raw and x.dtype == np.float64:
            return x.astype(np.float32)
        return x

    def add(self, acc, term):
        # acc is always a rounded partial
        if self.raw and term.dtype == np.float64:
            return _fused_round_f32(acc.astype(np.float64), term)
        return acc + term

    def sequential(self, leaves):
        if self.raw and leaves.dtype == np.float64 and leaves.shape[-1] > 1:
            return self._fused_chain(leaves)
        if not self.raw:
            # ufunc accumulate is strictly left to right in the array dtype
            return np.add.accumulate(leaves, axis=-1)[..., -1]
        acc = self.round(leaves[..., 0])
        for j in range(1, leaves.shape[-1]):
            acc = self.add(acc, leaves[..., j])
        return acc

    def _fused_chain(self, leaves):
        # Plain RN53-then-RN24 chain; rows where some partial sum needs the
        # round-to-odd fix-up are redone step by step.
        n = leaves.shape[-1]
        sums = np.empty(leaves.shape[:-1] + (n - 1,))
        acc = leaves[..., 0].astype(np.float32)
        for j in range(1, n):
            s = np.add(acc, leaves[..., j], out=sums[..., j - 1])
            acc = s.astype(np.float32)
        bad = _risky(sums).any(axis=-1)
        if bad.any():
            rows = leaves[bad]
            slow = rows[:, 0].astype(np.float32)
            for j in range(1, n):
                slow = _fused_round_f32(slow.astype(np.float64), rows[:, j])
            acc[bad] = slow
        return acc

    def pairwise(self, leaves):
        n = leaves.shape[-1]
        if n == 1:
            return leaves[..., 0]
        h = (n + 1) // 2
        left = self.round(self.pairwise(leaves[..., :h]))
        return self.add(left, self.pairwise(leaves[..., h:]))

    def blocked(self, leaves, block):
        n = leaves.shape[-1]
        if block >= n:
            return self.sequential(leaves)
        nb, rem = divmod(n, block)
        full = leaves[..., : nb * block].reshape(leaves.shape[:-1] + (nb, block))
        partials = self.sequential(full)
        acc = np.add.accumulate(partials, axis=-1)[..., -1]
        if rem:
            acc = acc + self.sequential(leaves[..., nb * block:])
        return acc

    def __call__(self, leaves, block):
        tree = self.p.tree
        if tree is Tree.SEQUENTIAL:
            out = self.sequential(leaves)
        elif tree is Tree.PAIRWISE:
            out = self.round(self.pairwise(leaves))
        else:
            out = self.blocked(leaves, block)
        return np.asarray(out).astype(np.float32)


def _tiling(profile: BackendProfile, n: int, batch_size: int, batch_index: int) -> tuple[int, int]:
    """(effective block length, rotation offset) for one batch slot."""
    if profile.batch_tiling is BatchTiling.PER_ROW or batch_size == 1:
        return profile.block_size, 0
    eff = max(1, profile.block_size // batch_size)
    return eff, (batch_index * eff) % n


def _rotate(leaves: np.ndarray, offset: int) -> np.ndarray:
    if offset == 0:
        return leaves
    return np.concatenate([leaves[..., offset:], leaves[..., :offset]], axis=-1)


def _check_batch(batch_size: int):
    if int(batch_size) != batch_size or batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size!r}")


def _batched_reduce(leaves, profile, raw, batch_size, batch_index):
    """Reduce leaves of shape (rows, ..., n); batch_index gives each row's slot."""
    n = leaves.shape[-1]
    red = _Reducer(profile, raw)
    slots = np.broadcast_to(np.asarray(batch_index, dtype=np.int64), leaves.shape[:1])
    uniq = np.unique(slots)
    if len(uniq) == 1:
        block, offset = _tiling(profile, n, batch_size, int(uniq[0]))
        return red(_rotate(leaves, offset), block)
    out = np.empty(leaves.shape[:-1], dtype=np.float32)
    for slot in uniq:
        rows = slots == slot
        block, offset = _tiling(profile, n, batch_size, int(slot))
        out[rows] = red(_rotate(leaves[rows], offset), block)
    return out


def _as_f32(x, what="input") -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


@np.errstate(over="ignore", invalid="ignore")  # checked explicitly below
def reduce_sum(values, profile: BackendProfile) -> np.float32:
    """Sum a 1-D float32 sequence in the profile's order."""
    v = _as_f32(values).reshape(-1)
    if v.size == 0:
        return np.float32(0.0)
    leaves = v.astype(profile.acc_dtype)
    out = _Reducer(profile, raw=False)(leaves[None, :], profile.block_size)[0]
    if not np.isfinite(out):
        raise KernelOverflowError("reduce_sum")
    return np.float32(out)


@np.errstate(over="ignore", invalid="ignore")  # checked explicitly below
def reduce_last(x: np.ndarray, profile: BackendProfile, batch_size: int = 1, batch_index=0,
                kernel: str = "reduce_last") -> np.ndarray:
    """Sum over the last axis of ``x`` (leading axis = independent samples)."""
    _check_batch(batch_size)
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1], np.float32)
    out = _batched_reduce(x.astype(profile.acc_dtype), profile, False, batch_size, batch_index)
    if not np.all(np.isfinite(out)):
        raise KernelOverflowError(kernel)
    return out


@np.errstate(over="ignore", invalid="ignore")  # checked explicitly below
def gemm(a, b, profile: BackendProfile, batch_size: int = 1, batch_index=0) -> np.ndarray:
    """``a @ b`` for float32 ``a`` (m x k) and ``b`` (k x n).

    Output element (i, j) is the profile-ordered sum of ``a[i, t] * b[t, j]``
    over ``t``.  ``batch_index`` is a scalar or a length-m array giving the
    batch slot of every row; it only matters for interleaved profiles.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm shape mismatch: {a.shape} @ {b.shape}")
    _check_batch(batch_size)
    m, k = a.shape
    n = b.shape[1]
    if k == 0:
        return np.zeros((m, n), np.float32)
    slots = np.broadcast_to(np.asarray(batch_index, dtype=np.int64), (m,))
    out = np.empty((m, n), dtype=np.float32)
    a64 = a.astype(np.float64)
    bt64 = b.T.astype(np.float64)
    raw = profile.fused
    for start in range(0, m, _ROW_CHUNK):
        sl = slice(start, min(m, start + _ROW_CHUNK))
        prod = a64[sl, None, :] * bt64[None, :, :]  # exact
        if not raw:
            prod = prod.astype(profile.acc_dtype)
        out[sl] = _batched_reduce(prod, profile, raw, batch_size, slots[sl])
    if not np.all(np.isfinite(out)):
        raise KernelOverflowError("gemm")
    return out


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> tuple[np.ndarray, int, int]:
    """Patches of ``x`` (N, C, H, W) as rows (N*OH*OW, C*kh*kw), channel-major."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i: i + stride * oh: stride, j: j + stride * ow: stride]
    cols = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d(x, kernel, profile: BackendProfile, stride: int = 1, padding: int = 0,
           batch_size: int = 1, batch_index=0) -> np.ndarray:
    """2-D cross-correlation through :func:`gemm`.

    ``x`` is (C, H, W) or (N, C, H, W); ``kernel`` is (O, C, kh, kw).
    ``batch_index`` is per sample.
    """
    x = np.asarray(x, dtype=np.float32)
    kernel = np.asarray(kernel, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    o, c, kh, kw = kernel.shape
    n = x.shape[0]
    cols, oh, ow = im2col(x, kh, kw, stride, padding)
    slots = np.repeat(np.broadcast_to(np.asarray(batch_index, dtype=np.int64), (n,)), oh * ow)
    out = gemm(cols, kernel.reshape(o, c * kh * kw).T, profile, batch_size, slots)
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    return out[0] if single else np.ascontiguousarray(out)


def frobenius_demo(n: int, fill: float, profiles) -> dict[str, np.float32]:
    """trace(M^T M) for M = fill * ones(n, n), once per profile."""
    if n < 1:
        raise ValueError("n must be >= 1")
    m = np.full((n, n), fill, dtype=np.float32)
    out = {}
    for p in profiles:
        p = get_profile(p)
        prod = gemm(m.T, m, p)
        out[p.name] = reduce_sum(np.diagonal(prod), p)
    return out


def with_name(profile: BackendProfile, name: str) -> BackendProfile:
    return replace(profile, name=name)
