"""Dense float32 matrix ops, permutation vectors, and row-wise primitives.

Matrices are numpy float32 arrays in row-major order; vectors are 1-D float32
arrays. Permutations are index vectors, never materialized as 0/1 matrices on
hot paths (`to_matrix` exists for test oracles).
"""

import numpy as np
from dataclasses import dataclass, field

from .errors import DegenerateRowError, InvalidDimensionError

DTYPE = np.float32
NEG_INF = float("-inf")


def as_matrix(x):
    """Coerce to a 2-D float32 array."""
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise InvalidDimensionError(f"expected 2-D matrix, got ndim={m.ndim}")
    return m


def as_vector(x):
    """Coerce to a 1-D float32 array."""
    v = np.asarray(x, dtype=DTYPE).reshape(-1)
    return v


@dataclass(eq=False)
class Permutation:
    """A permutation of feature indices: indices[j] = source column placed at j."""

    indices: np.ndarray = field()

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise InvalidDimensionError("permutation needs at least one index")
        if not np.array_equal(np.sort(idx), np.arange(idx.size)):
            raise InvalidDimensionError("indices are not a bijection of 0..dim-1")
        self.indices = idx

    @property
    def dim(self):
        return int(self.indices.size)

    def is_identity(self):
        return bool(np.array_equal(self.indices, np.arange(self.dim)))

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(
            self.indices, other.indices
        )


def identity_perm(dim):
    """The identity permutation of the given dimension."""
    if dim < 1:
        raise InvalidDimensionError(f"dim must be >= 1, got {dim}")
    return Permutation(np.arange(dim))


def gen_permutation(dim, seed):
    """Uniformly random permutation, deterministic per seed (Fisher-Yates)."""
    if dim < 1:
        raise InvalidDimensionError(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    return Permutation(rng.permutation(dim))


def inverse_perm(p):
    """inverse.indices[p.indices[j]] = j."""
    inv = np.empty(p.dim, dtype=np.int64)
    inv[p.indices] = np.arange(p.dim)
    return Permutation(inv)


def compose_perm(p, q):
    """Permutation equivalent to applying p, then q (x·P·Q)."""
    if p.dim != q.dim:
        raise InvalidDimensionError(f"compose dims differ: {p.dim} vs {q.dim}")
    return Permutation(p.indices[q.indices])


def to_matrix(p):
    """Explicit 0/1 permutation matrix; test-oracle and benchmark use only."""
    m = np.zeros((p.dim, p.dim), dtype=DTYPE)
    m[p.indices, np.arange(p.dim)] = 1.0
    return m


def apply_col_perm(x, p):
    """x·π by column indexing: out[i, j] = x[i, indices[j]]."""
    x = as_matrix(x)
    if x.shape[1] != p.dim:
        raise InvalidDimensionError(f"cols {x.shape[1]} != perm dim {p.dim}")
    return x[:, p.indices]


def apply_row_perm(x, p):
    """πᵀ·x by row indexing: out[i] = x[indices[i]]."""
    x = as_matrix(x)
    if x.shape[0] != p.dim:
        raise InvalidDimensionError(f"rows {x.shape[0]} != perm dim {p.dim}")
    return x[p.indices, :]


def apply_vec_perm(v, p):
    """v·π for a row vector (γπ, βπ)."""
    v = as_vector(v)
    if v.size != p.dim:
        raise InvalidDimensionError(f"vector dim {v.size} != perm dim {p.dim}")
    return v[p.indices]


def matmul(a, b):
    """Standard matrix product; 64-bit accumulation, 32-bit result."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise InvalidDimensionError(f"matmul shapes {a.shape} x {b.shape}")
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(DTYPE)


def softmax_rows(x):
    """Row-wise softmax, stabilized by per-row max; -inf entries get weight 0."""
    x = as_matrix(x)
    top = np.max(x, axis=1, keepdims=True)
    if np.any(np.isneginf(top)):
        raise DegenerateRowError("softmax row is entirely -inf")
    with np.errstate(invalid="ignore"):
        e = np.exp(x - top)
    e = np.where(np.isneginf(x), 0.0, e)
    denom = np.sum(e, axis=1, keepdims=True, dtype=np.float64)
    return (e / denom).astype(DTYPE)


def layernorm(x, gamma, beta, eps=1e-5):
    """γ ∘ (x − μ)/√(σ² + eps) + β with per-row population variance."""
    x = as_matrix(x)
    gamma = as_vector(gamma)
    beta = as_vector(beta)
    if x.shape[1] != gamma.size or x.shape[1] != beta.size:
        raise InvalidDimensionError(
            f"layernorm dims: x cols {x.shape[1]}, gamma {gamma.size}, beta {beta.size}"
        )
    mu = np.mean(x, axis=1, keepdims=True, dtype=np.float64)
    var = np.mean((x - mu) ** 2, axis=1, keepdims=True, dtype=np.float64)
    out = (x - mu) / np.sqrt(var + eps)
    return (out * gamma + beta).astype(DTYPE)


def rmsnorm(x, gamma, eps=1e-5):
    """γ ∘ x/√(mean(x²) + eps), per row."""
    x = as_matrix(x)
    gamma = as_vector(gamma)
    if x.shape[1] != gamma.size:
        raise InvalidDimensionError(
            f"rmsnorm dims: x cols {x.shape[1]}, gamma {gamma.size}"
        )
    ms = np.mean(x.astype(np.float64) ** 2, axis=1, keepdims=True)
    out = x / np.sqrt(ms + eps)
    return (out * gamma).astype(DTYPE)


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(as_matrix(x), 0.0)


def gelu(x):
    """Exact Gaussian-CDF GeLU: x·Φ(x)."""
    from scipy.special import erf

    x = as_matrix(x)
    return (x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))).astype(DTYPE)


def sigmoid(x):
    """Elementwise logistic function."""
    x = as_matrix(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
