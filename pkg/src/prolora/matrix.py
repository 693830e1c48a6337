"""Dense matrix primitives and the seeded random stream everything else builds on.

All operations are pure: inputs are never mutated and every result is a fresh
float64 array. Shape problems raise :class:`ShapeError` naming both operand
shapes instead of surfacing a numpy traceback from deep inside a caller.

The random stream is splitmix64, chosen because it is trivial to reproduce
bit-exactly in any language:

    state   <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z       <- state
    z       <- (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9  mod 2^64
    z       <- (z XOR (z >> 27)) * 0x94D049BB133111EB  mod 2^64
    output  <- z XOR (z >> 31)

Uniform doubles take the top 53 bits: u = (output >> 11) * 2^-53, giving
values in [0, 1). Reference outputs for seed 0:
0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ShapeError",
    "SplitMix64",
    "add",
    "concat_h",
    "concat_v",
    "matmul",
    "max_abs_diff",
    "roll",
    "scale",
    "slice_block",
    "transpose",
]

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def _require_2d(x: np.ndarray, name: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with an explicit inner-dimension check."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    return a @ b


def concat_h(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Append the columns of b after a. Requires equal row counts."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"cannot concat horizontally: {a.shape} vs {b.shape} (rows differ)")
    return np.concatenate([a, b], axis=1)


def concat_v(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Append the rows of b below a. Requires equal column counts."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cannot concat vertically: {a.shape} vs {b.shape} (cols differ)")
    return np.concatenate([a, b], axis=0)


def roll(x: np.ndarray, shift: int, axis: int) -> np.ndarray:
    """Circular shift along an axis: the source index j lands at (j + shift) mod L.

    shift may be any integer (reduced modulo the axis length); axis is 0 for
    rows, 1 for columns. roll(x, 0, axis) is a copy of x.
    """
    _require_2d(x, "x")
    if axis not in (0, 1):
        raise ShapeError(f"axis must be 0 (rows) or 1 (cols), got {axis!r}")
    return np.roll(x, shift, axis=axis)


def slice_block(x: np.ndarray, rows: tuple[int, int], cols: tuple[int, int]) -> np.ndarray:
    """Copy of the sub-block x[rows[0]:rows[1], cols[0]:cols[1]]. Bounds-checked."""
    _require_2d(x, "x")
    r0, r1 = rows
    c0, c1 = cols
    if not (0 <= r0 <= r1 <= x.shape[0]) or not (0 <= c0 <= c1 <= x.shape[1]):
        raise ShapeError(f"slice rows={rows} cols={cols} out of bounds for shape {x.shape}")
    return x[r0:r1, c0:c1].copy()


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise sum of equal-shape matrices."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def scale(x: np.ndarray, factor: float) -> np.ndarray:
    """Multiply every element by a scalar."""
    _require_2d(x, "x")
    return x * float(factor)


def transpose(x: np.ndarray) -> np.ndarray:
    """Transposed copy."""
    _require_2d(x, "x")
    return x.T.copy()


def max_abs_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Largest absolute element-wise difference between equal-shape matrices."""
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare {a.shape} and {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


class SplitMix64:
    """Deterministic 64-bit stream (see module docstring for the recurrence).

    The scalar path uses Python integers; bulk draws use wrapped uint64 numpy
    arithmetic on the closed form state_k = seed + k * GAMMA, which produces
    the identical stream. Both paths advance the same state, so scalar and
    vector draws can be interleaved.
    """

    GAMMA = 0x9E3779B97F4A7C15
    _MUL1 = 0xBF58476D1CE4E5B9
    _MUL2 = 0x94D049BB133111EB
    _M = (1 << 64) - 1

    def __init__(self, seed: int) -> None:
        self.state = int(seed) & self._M

    def next_u64(self) -> int:
        """Advance one step and return the next 64-bit output."""
        self.state = (self.state + self.GAMMA) & self._M
        z = self.state
        z = ((z ^ (z >> 30)) * self._MUL1) & self._M
        z = ((z ^ (z >> 27)) * self._MUL2) & self._M
        return z ^ (z >> 31)

    def u64_array(self, count: int) -> np.ndarray:
        """Next `count` outputs as a uint64 array (vectorized, same stream)."""
        if count < 0:
            raise ValueError("count must be non-negative")
        steps = np.arange(1, count + 1, dtype=np.uint64)
        z = (np.uint64(self.state) + steps * np.uint64(self.GAMMA)) & _MASK64
        self.state = (self.state + count * self.GAMMA) & self._M
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(self._MUL1)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(self._MUL2)) & _MASK64
        return z ^ (z >> np.uint64(31))

    def uniform(self, lo: float, hi: float, size: tuple[int, ...] | int | None = None):
        """Uniform draw(s) in [lo, hi). Scalar when size is None, else an array.

        Each value consumes one stream output: u = (bits >> 11) * 2^-53,
        mapped to lo + u * (hi - lo). Arrays are filled in row-major order.
        """
        if not lo < hi:
            raise ValueError(f"uniform requires lo < hi, got lo={lo}, hi={hi}")
        if size is None:
            u = (self.next_u64() >> 11) * 2.0**-53
            return lo + u * (hi - lo)
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + u * (hi - lo)).reshape(shape)

    def normal(self, size: tuple[int, ...] | int) -> np.ndarray:
        """Standard normal draws via Box-Muller.

        For k values, ceil(k/2) pairs (u1, u2) are drawn in stream order with
        u1 = ((bits >> 11) + 1) * 2^-53 in (0, 1]; the pair yields
        sqrt(-2 ln u1) * (cos, sin)(2 pi u2) and a trailing value is dropped
        for odd k. Arrays are filled in row-major order.
        """
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        bits = self.u64_array(2 * pairs).reshape(pairs, 2)
        u1 = ((bits[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (bits[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n].reshape(shape)
