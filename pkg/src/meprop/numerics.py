"""Dense linear algebra, magnitude top-k selection, and sparse-row gradients.

Vectors are 1-D float64 ndarrays, matrices are row-major 2-D float64
ndarrays. Every function here is pure; the only mutable object is
FlopCounter, which belongs to a single training worker and is only
touched when passed in explicitly.
"""

import numpy as np

from .errors import DimensionMismatch

__all__ = [
    "FlopCounter",
    "IndexSet",
    "SparseRowGradient",
    "matvec",
    "transpose_matvec",
    "outer",
    "top_k_indices",
    "top_k_mask",
    "sparse_outer",
    "masked_transpose_matvec",
    "densify",
]


class FlopCounter:
    """Running count of multiply-add operations.

    The count only grows; ``reset`` is the one way back to zero.
    """

    __slots__ = ("multiply_adds",)

    def __init__(self):
        self.multiply_adds = 0

    def add(self, n):
        self.multiply_adds += int(n)

    def reset(self):
        self.multiply_adds = 0

    def __repr__(self):
        return f"FlopCounter(multiply_adds={self.multiply_adds})"


class IndexSet:
    """Strictly increasing 0-based neuron indices drawn from a fixed universe."""

    __slots__ = ("indices", "universe")

    def __init__(self, indices, universe):
        idx = np.asarray(indices, dtype=np.intp)
        universe = int(universe)
        if idx.ndim != 1:
            raise ValueError(f"indices must be 1-D, got shape {idx.shape}")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= universe:
                raise ValueError(
                    f"indices must lie in [0, {universe}), got range "
                    f"[{idx[0]}, {idx[-1]}]"
                )
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
        self.indices = idx
        self.universe = universe

    @classmethod
    def full(cls, universe):
        obj = cls.__new__(cls)
        obj.indices = np.arange(universe, dtype=np.intp)
        obj.universe = int(universe)
        return obj

    def __len__(self):
        return int(self.indices.size)

    def __iter__(self):
        return iter(self.indices.tolist())

    def __eq__(self, other):
        if not isinstance(other, IndexSet):
            return NotImplemented
        return self.universe == other.universe and np.array_equal(
            self.indices, other.indices
        )

    def __repr__(self):
        return f"IndexSet({self.indices.tolist()}, universe={self.universe})"


class SparseRowGradient:
    """Top-k weight gradient: an index set plus the dense k-by-m row block."""

    __slots__ = ("index_set", "block")

    def __init__(self, index_set, block):
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[0] != len(index_set):
            raise DimensionMismatch(
                f"sparse row block of shape {block.shape} does not match "
                f"{len(index_set)} selected rows"
            )
        self.index_set = index_set
        self.block = block

    @property
    def shape(self):
        return (self.index_set.universe, self.block.shape[1])

    def __repr__(self):
        return f"SparseRowGradient(rows={len(self.index_set)}, shape={self.shape})"


def _as_vector(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DimensionMismatch(f"{name} must be a non-empty vector, got shape {x.shape}")
    return x


def _as_matrix(W, name):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or 0 in W.shape:
        raise DimensionMismatch(f"{name} must be a non-empty matrix, got shape {W.shape}")
    return W


def matvec(W, x, flops=None):
    """``W @ x``; counts rows*cols multiply-adds on the given counter."""
    W = _as_matrix(W, "W")
    x = _as_vector(x, "x")
    if W.shape[1] != x.shape[0]:
        raise DimensionMismatch(
            f"matvec: matrix shape {W.shape} is incompatible with vector shape {x.shape}"
        )
    if flops is not None:
        flops.add(W.shape[0] * W.shape[1])
    return W @ x


def transpose_matvec(W, g, flops=None):
    """``W.T @ g``; counts rows*cols multiply-adds."""
    W = _as_matrix(W, "W")
    g = _as_vector(g, "g")
    if W.shape[0] != g.shape[0]:
        raise DimensionMismatch(
            f"transpose_matvec: matrix shape {W.shape} is incompatible with "
            f"vector shape {g.shape}"
        )
    if flops is not None:
        flops.add(W.shape[0] * W.shape[1])
    return W.T @ g


def outer(g, x, flops=None):
    """Dense outer product ``g x^T``; counts len(g)*len(x) multiply-adds."""
    g = _as_vector(g, "g")
    x = _as_vector(x, "x")
    if flops is not None:
        flops.add(g.shape[0] * x.shape[0])
    return g[:, None] * x[None, :]


def top_k_indices(v, k):
    """Indices of the k largest-magnitude entries of v, as an IndexSet.

    Equal magnitudes are broken toward the lower index, so the result is
    a deterministic function of the values. ``k >= len(v)`` returns every
    index. Uses partial selection; no full sort of v.
    """
    v = _as_vector(v, "v")
    k = int(k)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = v.shape[0]
    if k >= n:
        return IndexSet.full(n)
    mag = np.abs(v)
    kth = np.partition(mag, n - k)[n - k]
    chosen = np.flatnonzero(mag > kth)
    short = k - chosen.shape[0]
    if short > 0:
        # flatnonzero scans ascending, so boundary ties resolve to the
        # lowest indices.
        ties = np.flatnonzero(mag == kth)[:short]
        chosen = np.sort(np.concatenate([chosen, ties]))
    return IndexSet(chosen, n)


def top_k_mask(v, k):
    """Copy of v with everything outside the top-k magnitudes zeroed."""
    v = _as_vector(v, "v")
    out = np.zeros_like(v)
    sel = top_k_indices(v, k).indices
    out[sel] = v[sel]
    return out


def sparse_outer(sigma_prime, x, index_set, flops=None):
    """Outer product restricted to the selected rows.

    Row r of the block, for selected index i, is ``sigma_prime[i] * x``.
    Counts |S|*len(x) multiply-adds.
    """
    sigma_prime = _as_vector(sigma_prime, "sigma_prime")
    x = _as_vector(x, "x")
    if index_set.universe != sigma_prime.shape[0]:
        raise DimensionMismatch(
            f"sparse_outer: index universe {index_set.universe} does not match "
            f"gradient length {sigma_prime.shape[0]}"
        )
    sel = index_set.indices
    block = sigma_prime[sel][:, None] * x[None, :]
    if flops is not None:
        flops.add(sel.shape[0] * x.shape[0])
    return SparseRowGradient(index_set, block)


def masked_transpose_matvec(W, sigma_prime, index_set, flops=None):
    """``W.T @ (sigma_prime masked to the index set)``.

    Only the selected rows of W are read; counts |S|*cols multiply-adds.
    """
    W = _as_matrix(W, "W")
    sigma_prime = _as_vector(sigma_prime, "sigma_prime")
    if index_set.universe != W.shape[0]:
        raise DimensionMismatch(
            f"masked_transpose_matvec: index universe {index_set.universe} does "
            f"not match matrix shape {W.shape}"
        )
    if sigma_prime.shape[0] != W.shape[0]:
        raise DimensionMismatch(
            f"masked_transpose_matvec: matrix shape {W.shape} is incompatible "
            f"with vector shape {sigma_prime.shape}"
        )
    sel = index_set.indices
    if flops is not None:
        flops.add(sel.shape[0] * W.shape[1])
    return W[sel].T @ sigma_prime[sel]


def densify(g):
    """Scatter a SparseRowGradient back to its full-size dense matrix."""
    rows, cols = g.shape
    out = np.zeros((rows, cols), dtype=np.float64)
    out[g.index_set.indices] = g.block
    return out
