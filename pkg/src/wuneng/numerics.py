"""Dense numeric kernel: float64 arrays, stable softmax, layer norm, RNG.

Everything downstream works on plain ``numpy.float64`` arrays of rank <= 3,
C-contiguous (row-major). All functions here are pure; the only stateful
object is :class:`Rng`, which is single-owner by convention (split it, never
share it).
"""

from __future__ import annotations

from enum import Enum

import numpy as np
from scipy.special import expit

Array = np.ndarray

MAX_RANK = 3


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation."""


class NumericOverflow(ArithmeticError):
    """A computation produced a non-finite value."""


def tensor(data) -> Array:
    """Coerce to a float64 row-major array of rank <= 3."""
    out = np.ascontiguousarray(data, dtype=np.float64)
    if out.ndim > MAX_RANK:
        raise ShapeError(f"rank {out.ndim} exceeds maximum {MAX_RANK}")
    return out


def check_finite(x: Array, context: str = "") -> Array:
    if not np.all(np.isfinite(x)):
        where = context or "array"
        raise NumericOverflow(f"non-finite values in {where}")
    return x


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with an explicit inner-dimension check.

    Accepts the numpy matmul shapes used in this package: 2-d x 2-d,
    a stacked 3-d operand against a 2-d one, and matching 3-d stacks.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul requires at least rank-1 operands")
    inner_a = a.shape[-1]
    inner_b = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def _upper_mask(n: int) -> Array:
    mask = _MASK_CACHE.get(n)
    if mask is None:
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        _MASK_CACHE[n] = mask
    return mask


_MASK_CACHE: dict = {}


def softmax_masked_rows(m: Array, causal: bool = False) -> Array:
    """Row softmax over the last axis, optionally with a causal mask.

    With ``causal=True`` the matrix must be square in its last two dims;
    entries above the diagonal are excluded from normalization and come
    back as exact zeros. Max-subtraction keeps the exponentials in range.
    """
    m = np.asarray(m, dtype=np.float64)
    if causal:
        n, ncols = m.shape[-2], m.shape[-1]
        if n != ncols:
            raise ShapeError(f"causal softmax needs a square matrix, got {m.shape}")
        scores = np.where(_upper_mask(n), -np.inf, m)
    else:
        scores = m
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / np.sum(expd, axis=-1, keepdims=True)


def layer_norm(x: Array, scale: Array, shift: Array, eps: float = 1e-5) -> Array:
    """Normalize over the last axis (population variance), then affine."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return scale * (x - mean) / np.sqrt(var + eps) + shift


class ActivationKind(str, Enum):
    RELU_SQUARED = "relu_squared"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


def relu_squared(x: Array) -> Array:
    return np.square(np.maximum(x, 0.0))


def sigmoid(x: Array) -> Array:
    return expit(np.asarray(x, dtype=np.float64))


def softplus(x: Array) -> Array:
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def activation(kind: ActivationKind, x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if kind == ActivationKind.RELU_SQUARED:
        return relu_squared(x)
    if kind == ActivationKind.SIGMOID:
        return sigmoid(x)
    if kind == ActivationKind.IDENTITY:
        return x.copy()
    raise ValueError(f"unknown activation kind: {kind!r}")


_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """SplitMix64 finalizer: a bijective avalanche on 64-bit ints."""
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Rng:
    """Counter-based deterministic generator (SplitMix64).

    The stream is a pure function of (seed, counter), so the same seed gives
    a bit-identical sequence on every platform. ``split`` derives an
    independent child stream; callers hand a split to each consumer instead
    of sharing one instance across threads.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        return _mix64((self.seed + self.counter * _GAMMA) & _MASK64)

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 random mantissa bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, count: int) -> Array:
        return np.array([self.uniform() for _ in range(count)], dtype=np.float64)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo bias is < n / 2**64."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return self.next_u64() % n

    def split(self) -> "Rng":
        return Rng(self.next_u64())


def init_glorot(rows: int, cols: int, rng: Rng) -> Array:
    """Uniform on +-sqrt(6 / (rows + cols)), drawn row-major from ``rng``."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"init_glorot needs positive dims, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    flat = rng.uniforms(rows * cols)
    return ((2.0 * flat - 1.0) * bound).reshape(rows, cols)
