"""Dense 2-D float64 matrices, the handful of operations the model needs,
and a seedable random stream with named sub-streams.

Matrices are plain ``numpy.ndarray`` objects of ``ndim == 2`` and dtype
``float64``.  Every public operation validates shapes and returns a new
array; inputs are never mutated.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "Rng",
    "as_matrix",
    "matmul",
    "elementwise",
    "reduce",
    "softmax_rows",
    "sigmoid",
    "relu",
    "safe_log",
    "rng_uniform",
    "rng_normal",
    "LOG_FLOOR",
]

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Operand values are outside the operation's domain."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a 2-D float64 array.

    Scalars become 1x1 and vectors become a single row.
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    elif m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} "
            f"by {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def safe_log(z: np.ndarray) -> np.ndarray:
    """``log(max(z, 1e-12))``."""
    return np.log(np.maximum(z, LOG_FLOOR))


_UNARY = {
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": np.exp,
    "log": safe_log,
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply ``op`` elementwise.

    Unary ops: ``sigmoid``, ``relu``, ``exp``, ``log`` (floored at 1e-12).
    Binary ops: ``add``, ``sub``, ``mul`` take a matrix of equal shape or a
    scalar; ``max`` takes a scalar only (``max-with-scalar``).
    """
    a = as_matrix(a, "a")
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        return _UNARY[op](a)
    if op == "max":
        if b is None or np.ndim(b) != 0:
            raise ShapeError("max takes a scalar operand")
        return np.maximum(a, float(b))
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise TypeError(f"{op} needs a second operand")
    if np.ndim(b) == 0:
        return _BINARY[op](a, float(b))
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return _BINARY[op](a, b)


def reduce(op: str, a, axis: str) -> np.ndarray:
    """Reduce along ``axis``; the reduced axis is kept with length 1.

    ``axis="rows"`` collapses the row index (column-wise reduction, result
    1 x cols); ``axis="cols"`` collapses the column index (rows x 1).
    ``argmax`` returns the lowest index among ties, as float64.
    """
    a = as_matrix(a, "a")
    if a.size == 0:
        raise DomainError(f"cannot {op}-reduce an empty {a.shape} matrix")
    ax = {"rows": 0, "cols": 1}[axis]
    if op == "sum":
        return a.sum(axis=ax, keepdims=True)
    if op == "mean":
        return a.mean(axis=ax, keepdims=True)
    if op == "max":
        return a.max(axis=ax, keepdims=True)
    if op == "argmax":
        # np.argmax returns the first occurrence
        return np.argmax(a, axis=ax).astype(np.float64).reshape(
            (1, -1) if ax == 0 else (-1, 1)
        )
    raise ValueError(f"unknown reduction {op!r}")


def softmax_rows(a) -> np.ndarray:
    a = as_matrix(a, "a")
    if a.size == 0:
        raise DomainError("softmax of an empty matrix")
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class Rng:
    """Reproducible random stream.

    Backed by numpy's PCG64 generator seeded through ``SeedSequence``.
    ``stream(name)`` derives an independent child whose spawn key is the
    parent's key extended with ``crc32(name)``, so each consumer (``init``,
    ``dropout``, ``sampler``, ``generator``...) gets its own stream and
    adding or reordering consumers never shifts another consumer's draws.

    Normal variates come from the Box-Muller transform of uniform pairs:
    ``sqrt(-2 ln(1-u1)) * cos(2 pi u2)`` and the matching ``sin`` term.
    """

    def __init__(self, seed: int = 0, _key: tuple = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def stream(self, name: str) -> "Rng":
        return Rng(self.seed, self.key + (zlib.crc32(name.encode("utf-8")),))

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"

    def uniform(self, rows: int, cols: int) -> np.ndarray:
        _check_dims(rows, cols)
        return self._gen.random((rows, cols))

    def normal(self, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        _check_dims(rows, cols)
        if std < 0:
            raise DomainError("std must be non-negative")
        n = rows * cols
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1]
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return mean + std * z.reshape(rows, cols)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _check_dims(rows, cols):
    if rows < 1 or cols < 1:
        raise ShapeError(f"rows and cols must be >= 1, got {rows}x{cols}")


def rng_uniform(rng: Rng, rows: int, cols: int) -> np.ndarray:
    return rng.uniform(rows, cols)


def rng_normal(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    return rng.normal(rows, cols, mean, std)
