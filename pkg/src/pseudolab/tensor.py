"""Dense float32 array substrate and deterministic seeded randomness.

Every numeric value in this package lives in a contiguous row-major float32
``numpy.ndarray`` (a "dense tensor"). Public reductions accumulate in
float64 before casting back to float32, so a fixed input always produces
the same bits regardless of BLAS threading. There is no broadcasting magic
on the public surface: shape mismatches raise :class:`ShapeError` instead
of silently expanding.

Randomness comes exclusively from :class:`SeededRng`, a Philox4x64
counter-based generator keyed by a 64-bit seed. Child streams are derived
with SplitMix64 (see :meth:`SeededRng.fork`), so forked parallel work
replays identically across runs and platforms.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "SeededRng",
    "splitmix64",
    "as_tensor",
    "matmul",
    "softmax",
    "mean_std",
    "rng_uniform",
    "rng_gaussian",
    "rng_bernoulli",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class ShapeError(ValueError):
    """Operands have incompatible or unexpected shapes."""


def splitmix64(x: int) -> int:
    """One step of the SplitMix64 mixer (Steele et al. constants)."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Coerce `data` to a contiguous row-major float32 array."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D tensors with float64 accumulation.

    Accumulating in float64 and rounding once to float32 makes the result
    independent of the summation order the backend picks, so it can be
    checked bit-for-bit against a naive reference.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matmul produced non-finite values")
    return out


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax along `axis` (max subtraction, float64 accumulation)."""
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def mean_std(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and population (n-divisor) standard deviation along `axis`."""
    x64 = np.asarray(x, dtype=np.float64)
    if x64.shape[axis] < 1:
        raise ShapeError(f"mean_std needs axis length >= 1, got shape {x64.shape}")
    mean = x64.mean(axis=axis)
    std = x64.std(axis=axis)  # ddof=0: the slice is the whole population of votes
    return mean.astype(np.float32), std.astype(np.float32)


class SeededRng:
    """Deterministic random stream keyed by a 64-bit seed.

    Backed by numpy's Philox4x64 counter-based bit generator: the same seed
    and call sequence yields bit-identical output on every platform. A
    stream is single-owner -- never share one across threads; give parallel
    work children from :meth:`fork` instead.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed <= _MASK64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(key=seed))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"

    def fork(self, *path: int) -> "SeededRng":
        """Child stream at an integer path.

        The child seed is ``splitmix64(parent ^ splitmix64(k + 1))`` folded
        left over the path elements, so ``fork(a, b)`` == ``fork(a).fork(b)``
        and distinct paths give independent streams.
        """
        s = self.seed
        for k in path:
            s = splitmix64(s ^ splitmix64((int(k) + 1) & _MASK64))
        return SeededRng(s)

    def uniform(self, shape) -> np.ndarray:
        """float32 samples from U[0, 1)."""
        return self._gen.random(size=shape, dtype=np.float32)

    def gaussian(self, shape, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        out = self._gen.standard_normal(size=shape, dtype=np.float32)
        if sigma != 1.0:
            out *= np.float32(sigma)
        if mu != 0.0:
            out += np.float32(mu)
        return out

    def bernoulli(self, shape, p: float) -> np.ndarray:
        """float32 0/1 samples; p=0 gives all zeros, p=1 all ones."""
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {p}")
        return (self._gen.random(size=shape) < p).astype(np.float32)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rng_uniform(rng: SeededRng, shape) -> np.ndarray:
    return rng.uniform(shape)


def rng_gaussian(rng: SeededRng, shape, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
    return rng.gaussian(shape, mu=mu, sigma=sigma)


def rng_bernoulli(rng: SeededRng, shape, p: float) -> np.ndarray:
    return rng.bernoulli(shape, p)
