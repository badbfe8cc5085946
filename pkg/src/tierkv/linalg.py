"""Numerical primitives: truncated SVD, rotary embedding, softmax, similarities."""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import DataError, ParameterError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TruncatedSVD:
    """Rank-r factorization ``X ~= A @ B`` with ``A = U_r S_r`` and ``B = V_r^T``."""

    A: np.ndarray
    B: np.ndarray
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.B.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.A.astype(np.float64) @ self.B.astype(np.float64)).astype(np.float32)


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0
    interleaved: bool = False

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ParameterError(f"rotary head_dim must be a positive even number, got {self.head_dim}")
        if not self.base > 0:
            raise ParameterError(f"rotary base must be positive, got {self.base}")

    def inv_freq(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)


class Spectrum(NamedTuple):
    relative: np.ndarray
    sigma_max: float
    zero: bool


def as_matrix(X, name="X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError(f"{name} contains non-finite entries")
    return X


def _svd64(X):
    U, S, Vt = np.linalg.svd(X.astype(np.float64), full_matrices=False)
    # sign convention: largest-magnitude entry of each right vector is positive
    pivot = np.argmax(np.abs(Vt), axis=1)
    signs = np.sign(Vt[np.arange(Vt.shape[0]), pivot])
    signs[signs == 0] = 1.0
    return U * signs, S, Vt * signs[:, None]


def truncated_svd(X, r: int) -> TruncatedSVD:
    X = as_matrix(X)
    s, D = X.shape
    if not 1 <= r <= min(s, D):
        raise ParameterError(f"rank {r} outside [1, {min(s, D)}] for a {s}x{D} matrix")
    U, S, Vt = _svd64(X)
    A = (U[:, :r] * S[:r]).astype(np.float32)
    B = Vt[:r].astype(np.float32)
    return TruncatedSVD(A=A, B=B, singular_values=S.astype(np.float64))


def singular_spectrum(X) -> Spectrum:
    """Singular values normalized by the largest one.

    A zero matrix yields an all-zero spectrum with ``zero=True``.
    """
    X = as_matrix(X)
    S = np.linalg.svd(X.astype(np.float64), compute_uv=False)
    if S.size == 0 or S[0] == 0.0:
        return Spectrum(np.zeros_like(S), 0.0, True)
    return Spectrum(np.clip(S / S[0], 0.0, 1.0), float(S[0]), False)


def rope_apply(K, positions, params: RopeParams) -> np.ndarray:
    K = np.asarray(K, dtype=np.float32)
    if K.ndim != 2:
        raise DataError(f"expected a 2-D key matrix, got shape {K.shape}")
    if K.shape[1] % 2:
        raise ParameterError(f"rotary embedding needs an even head dim, got {K.shape[1]}")
    if K.shape[1] != params.head_dim:
        raise ParameterError(f"key dim {K.shape[1]} != rope head_dim {params.head_dim}")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (K.shape[0],):
        raise ParameterError(f"need one position per row: {positions.shape} vs {K.shape[0]} rows")
    return _kernels.rope(K, positions, params.inv_freq(), params.interleaved)


def rope_invert(K, positions, params: RopeParams) -> np.ndarray:
    """Undo ``rope_apply`` (rotation by the negated angle)."""
    return rope_apply(K, -np.asarray(positions, dtype=np.int64), params)


def softmax(x, axis=-1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return -1.0
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def chunk_similarities(K_rope, c: int):
    """Per-chunk means and the full (n_chunks, c) token-to-mean cosine table.

    Only complete chunks are considered; a ragged tail is ignored.
    """
    K_rope = as_matrix(K_rope, "K_rope")
    if c < 1:
        raise ParameterError(f"chunk size must be >= 1, got {c}")
    means, sims = _kernels.chunk_cosine(K_rope, c)
    n_degenerate = int(np.count_nonzero(sims == -1.0))
    if n_degenerate:
        log.debug("%d tokens have zero-norm key or chunk mean; similarity set to -1", n_degenerate)
    return means, sims


def chunk_cosine_similarity(K_rope, c: int) -> np.ndarray:
    """Minimum cosine similarity between each chunk's mean and its tokens."""
    K_rope = as_matrix(K_rope, "K_rope")
    if c < 1 or K_rope.shape[0] % c:
        raise ParameterError(f"chunk size {c} does not divide sequence length {K_rope.shape[0]}")
    _, sims = chunk_similarities(K_rope, c)
    return sims.min(axis=1)


def orthonormalize_rows(B, tol: float = 1e-6) -> np.ndarray:
    """Modified Gram-Schmidt over rows; rows whose residual norm falls below ``tol`` are dropped."""
    B = np.asarray(B, dtype=np.float64)
    basis = []
    for row in B:
        v = row.copy()
        for q in basis:
            v -= (q @ v) * q
        n = np.linalg.norm(v)
        if n > tol:
            basis.append(v / n)
    if not basis:
        return np.zeros((0, B.shape[1]))
    return np.vstack(basis)


def subspace_similarity(B1, B2) -> float:
    """Overlap of the row spaces of two rank-r right factors, in [0, 1].

    Equals the Frobenius inner product of the two orthogonal projectors
    divided by r.
    """
    B1 = np.asarray(B1, dtype=np.float64)
    B2 = np.asarray(B2, dtype=np.float64)
    if B1.ndim != 2 or B2.ndim != 2 or B1.shape[1] != B2.shape[1]:
        raise ParameterError(f"incompatible factor shapes {B1.shape} and {B2.shape}")
    if B1.shape[0] != B2.shape[0]:
        raise ParameterError(f"rank mismatch: {B1.shape[0]} vs {B2.shape[0]}")
    Q1 = orthonormalize_rows(B1)
    Q2 = orthonormalize_rows(B2)
    if Q1.shape[0] != Q2.shape[0]:
        raise ParameterError(f"rank mismatch after orthonormalization: {Q1.shape[0]} vs {Q2.shape[0]}")
    r = Q1.shape[0]
    if r == 0:
        raise DataError("both factors are numerically zero")
    val = float(np.sum((Q1 @ Q2.T) ** 2)) / r
    return min(max(val, 0.0), 1.0)
