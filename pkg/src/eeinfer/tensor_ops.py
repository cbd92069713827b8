"""Dense float64 kernel with a fixed reduction order, plus permutation tables.

Everything downstream leans on two properties of this module:

* ``matmul`` reduces over the inner dimension in ascending index order, always.
  BLAS and einsum were measured to break that order (blocked/SIMD partial
  sums), so the product is built as an explicit ascending-k sum of outer
  products. That keeps repeated runs, and pipelines that split a computation
  across workers, bit-identical.
* The nonlinear operators (relu/gelu/silu, layer_norm, rms_norm, row softmax)
  commute with permutations of the feature axis. The encryption layer is built
  entirely on that fact, and the property suite pins it down.

All inputs are converted to 2-D float64 arrays; integer examples in the tests
are exact because float64 holds small integers exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ConfigError, NumericsError, ShapeError

ACTIVATION_KINDS = ("relu", "gelu", "silu")

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def as_matrix(x: object, name: str = "input") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _as_vector(x: object, length: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != length:
        raise ShapeError(f"{name} must be a vector of length {length}, got shape {arr.shape}")
    return arr


def matmul(a: object, b: object) -> np.ndarray:
    """Matrix product with the inner sum taken in ascending index order.

    out[i, j] = (((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...) exactly as a
    left-to-right fold; the test suite holds this bit-identical to a scalar
    reference loop.
    """
    av = as_matrix(a, "left operand")
    bv = as_matrix(b, "right operand")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {av.shape[0]}x{av.shape[1]} times "
            f"{bv.shape[0]}x{bv.shape[1]}"
        )
    out = np.zeros((av.shape[0], bv.shape[1]), dtype=np.float64)
    for k in range(av.shape[1]):
        # one term per k, added in order; elementwise add keeps each out[i, j]
        # a strict sequential accumulation
        out += av[:, k : k + 1] * bv[k : k + 1, :]
    return out


def softmax_rows(a: object) -> np.ndarray:
    """Row-wise softmax with max-subtraction stabilization.

    ``-inf`` entries are legal (they encode masked attention positions and
    come out as exact zeros). NaN, +inf, or a row that is entirely masked has
    no meaningful softmax and raises.
    """
    x = as_matrix(a, "softmax input")
    if np.isnan(x).any():
        raise NumericsError("softmax input contains NaN")
    if np.isposinf(x).any():
        raise NumericsError("softmax input contains +inf")
    if x.shape[1] == 0:
        raise ShapeError("softmax input has zero columns")
    row_max = np.max(x, axis=1, keepdims=True)
    if np.isneginf(row_max).any():
        raise NumericsError("softmax row is fully masked (all -inf)")
    e = np.exp(x - row_max)
    return e / np.sum(e, axis=1, keepdims=True)


def activate(kind: str, x: object) -> np.ndarray:
    """Elementwise nonlinearity. gelu is the exact erf form x*Phi(x)."""
    v = as_matrix(x, "activation input")
    if kind == "relu":
        return np.maximum(v, 0.0)
    if kind == "gelu":
        return v * 0.5 * (1.0 + erf(v * _INV_SQRT2))
    if kind == "silu":
        # expit is the numerically stable sigmoid
        return v * expit(v)
    raise ConfigError(f"unknown activation kind {kind!r}, expected one of {ACTIVATION_KINDS}")


def layer_norm(
    x: object,
    gamma: object,
    beta: object,
    eps: float = 1e-5,
) -> np.ndarray:
    """Per-row mean/variance normalization followed by an affine map."""
    v = as_matrix(x, "layer_norm input")
    g = _as_vector(gamma, v.shape[1], "gamma")
    b = _as_vector(beta, v.shape[1], "beta")
    mean = v.mean(axis=1, keepdims=True)
    centered = v - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / np.sqrt(var + eps) * g + b


def rms_norm(x: object, gamma: object, eps: float = 1e-6) -> np.ndarray:
    """Per-row division by the root mean square, then a gamma scale."""
    v = as_matrix(x, "rms_norm input")
    g = _as_vector(gamma, v.shape[1], "gamma")
    ms = (v * v).mean(axis=1, keepdims=True)
    return v / np.sqrt(ms + eps) * g


@dataclass(frozen=True, eq=False)
class PermTable:
    """A bijection on {0..n-1}; map[i] is the image of i.

    Immutable once built. The permutation-matrix view P has P[map[i], i] = 1,
    so P @ x moves coordinate i of a column vector to slot map[i].
    """

    map: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.map, dtype=np.int64)
        if arr.ndim != 1:
            raise ConfigError(f"permutation map must be 1-D, got shape {arr.shape}")
        if arr.shape[0] == 0:
            raise ConfigError("permutation over zero elements is not allowed")
        if not np.array_equal(np.sort(arr), np.arange(arr.shape[0])):
            raise ConfigError("permutation map is not a bijection on 0..n-1")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "map", arr)

    @property
    def n(self) -> int:
        return int(self.map.shape[0])

    @classmethod
    def identity(cls, n: int) -> "PermTable":
        return cls(np.arange(n, dtype=np.int64))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "PermTable":
        # Generator.permutation is a seeded Fisher-Yates shuffle
        return cls(rng.permutation(n).astype(np.int64))

    @cached_property
    def inv_map(self) -> np.ndarray:
        inv = np.empty(self.n, dtype=np.int64)
        inv[self.map] = np.arange(self.n, dtype=np.int64)
        inv.setflags(write=False)
        return inv

    def inverse(self) -> "PermTable":
        return PermTable(self.inv_map)

    def apply(self, indices: Sequence[int] | np.ndarray) -> np.ndarray:
        """Map an index vector elementwise: out[k] = map[indices[k]]."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise ShapeError(f"index out of range for permutation over {self.n} elements")
        return self.map[idx]

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.map, np.arange(self.n)))

    def matrix(self) -> np.ndarray:
        """Dense permutation matrix P with P[map[i], i] = 1."""
        p = np.zeros((self.n, self.n), dtype=np.float64)
        p[self.map, np.arange(self.n)] = 1.0
        return p

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PermTable):
            return NotImplemented
        return np.array_equal(self.map, other.map)

    def __hash__(self) -> int:
        return hash(self.map.tobytes())

    def __repr__(self) -> str:
        return f"PermTable(n={self.n})"


def permute_sequence(values: Iterable[object], table: PermTable) -> list[object]:
    """Reorder a flat sequence v so out[table.map[i]] = v[i] (column-vector view)."""
    vals = list(values)
    if len(vals) != table.n:
        raise ShapeError(f"sequence length {len(vals)} does not match permutation size {table.n}")
    out: list[object] = [None] * table.n
    for i, v in enumerate(vals):
        out[int(table.map[i])] = v
    return out
