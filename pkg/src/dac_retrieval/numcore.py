"""Dense numerical helpers on float64 numpy arrays.

Vectors are 1-D ``np.ndarray`` and matrices 2-D ``np.ndarray``; there is no
wrapper type. Every function validates its inputs and returns fresh arrays.
"""

from __future__ import annotations

import numpy as np

from dac_retrieval.errors import DegenerateVectorError, ShapeError

DEGENERATE_NORM = 1e-12
ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


class Rng:
    """Seeded counter-based generator (Philox 4x64).

    Philox is keyed by the seed and advances a counter, so a given seed
    reproduces the same stream on every platform numpy supports.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed & (2**64 - 1)))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def integer(self, high: int) -> int:
        """Uniform integer in ``[0, high)``."""
        return int(self._gen.integers(0, high))

    def keep_mask(self, shape, p: float) -> np.ndarray:
        """Boolean mask whose entries are True with probability ``1 - p``."""
        return self._gen.random(shape) >= p

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def as_vec(v, name="vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError(f"{name} is empty")
    return arr


def as_mat(m, name="matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_mat(a, "left operand")
    b = as_mat(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(v) -> np.ndarray:
    v = as_vec(v)
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax(v) -> np.ndarray:
    v = as_vec(v)
    shifted = v - v.max()
    return shifted - np.log(np.exp(shifted).sum())


def l2_normalize(v) -> np.ndarray:
    v = as_vec(v)
    n = np.linalg.norm(v)
    if not n >= DEGENERATE_NORM:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n:.3e}")
    return v / n


def cosine(a, b) -> float:
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        raise DegenerateVectorError("cosine of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def activation(v, kind: str) -> np.ndarray:
    """Elementwise activation; works on arrays of any rank."""
    v = np.asarray(v, dtype=np.float64)
    if kind == "tanh":
        return np.tanh(v)
    if kind == "relu":
        return np.maximum(v, 0.0)
    if kind == "sigmoid":
        # split on sign so neither branch overflows
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out
    if kind == "identity":
        return v.copy()
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(pre, post, kind: str) -> np.ndarray:
    """Derivative of ``activation`` given its input ``pre`` and output ``post``."""
    if kind == "tanh":
        return 1.0 - post * post
    if kind == "relu":
        return (pre > 0).astype(np.float64)
    if kind == "sigmoid":
        return post * (1.0 - post)
    if kind == "identity":
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {kind!r}")


def sample_normal(rng: Rng, rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ShapeError(f"rows and cols must be >= 1, got {rows}x{cols}")
    return rng.normal((rows, cols))


def check_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
