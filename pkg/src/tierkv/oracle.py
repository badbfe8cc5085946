"""Ground-truth references: exact full attention and exact per-chunk
attention mass. Written as plain loops in float64 and sharing no code with
the kernels they check."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ParameterError


@dataclass
class OracleReport:
    full_attn_out: np.ndarray
    chunk_masses: np.ndarray
    chunk_mass_ranking: np.ndarray
    max_abs_error: Optional[float] = None


def _check(Q, K, V, key_positions):
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64) if V is not None else None
    if Q.ndim == 2:
        Q = Q[None]
    if Q.ndim != 3 or K.ndim != 3:
        raise ParameterError(f"expected Q (s_q, h_q, d) and K (h_kv, n, d), got {Q.shape} and {K.shape}")
    h_q, d = Q.shape[1], Q.shape[2]
    h_kv, n = K.shape[0], K.shape[1]
    if K.shape[2] != d:
        raise ParameterError(f"head dim mismatch: Q has {d}, K has {K.shape[2]}")
    if h_q % h_kv:
        raise ParameterError(f"{h_q} query heads cannot be grouped over {h_kv} kv heads")
    if V is not None and V.shape != K.shape:
        raise ParameterError(f"V shape {V.shape} != K shape {K.shape}")
    if key_positions is None:
        key_positions = np.arange(n)
    key_positions = np.asarray(key_positions, dtype=np.int64)
    if key_positions.shape != (n,):
        raise ParameterError(f"need {n} key positions, got {key_positions.shape}")
    return Q, K, V, key_positions


def _row_weights(q, K_head, positions, q_pos, scale):
    logits = []
    for t in range(K_head.shape[0]):
        if positions[t] <= q_pos:
            logits.append((t, float(np.dot(q, K_head[t])) * scale))
    if not logits:
        raise ParameterError("query row sees no keys")
    top = max(v for _, v in logits)
    exps = [(t, math.exp(v - top)) for t, v in logits]
    total = math.fsum(e for _, e in exps)
    return [(t, e / total) for t, e in exps]


def full_attention(Q, K_rope, V, key_positions=None, q_positions=None) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V with grouped kv heads and causal masking.

    Q is ``(s_q, h_q, d)``; K_rope and V are ``(h_kv, n, d)``. Query head
    ``h`` reads kv head ``h // (h_q // h_kv)``. A key is visible to a query
    row when its position is <= the row's position. Without explicit query
    positions every query sits after all keys. Returns ``(s_q, h_q * d)``.
    """
    Q, K, V, kpos = _check(Q, K_rope, V, key_positions)
    s_q, h_q, d = Q.shape
    group = h_q // K.shape[0]
    if q_positions is None:
        q_positions = np.full(s_q, kpos.max() if kpos.size else 0)
    scale = 1.0 / math.sqrt(d)
    out = np.zeros((s_q, h_q, d))
    for i in range(s_q):
        for h in range(h_q):
            g = h // group
            for t, w in _row_weights(Q[i, h], K[g], kpos, q_positions[i], scale):
                out[i, h] += w * V[g, t]
    return out.reshape(s_q, h_q * d)


def attention_weights(Q, K_rope, key_positions=None, q_positions=None) -> np.ndarray:
    """Full softmax weights, shape ``(s_q, h_q, n)``."""
    Q, K, _, kpos = _check(Q, K_rope, None, key_positions)
    s_q, h_q, d = Q.shape
    n = K.shape[1]
    group = h_q // K.shape[0]
    if q_positions is None:
        q_positions = np.full(s_q, kpos.max() if kpos.size else 0)
    scale = 1.0 / math.sqrt(d)
    W = np.zeros((s_q, h_q, n))
    for i in range(s_q):
        for h in range(h_q):
            for t, w in _row_weights(Q[i, h], K[h // group], kpos, q_positions[i], scale):
                W[i, h, t] = w
    return W


def exact_chunk_masses(Q, K_rope, c: int, per_query_head: bool = False) -> np.ndarray:
    """Softmax mass falling on each chunk of the context keys.

    Mass is averaged over query rows, then reduced by max over the query
    heads sharing a kv head (the same reduction used for landmark scoring).
    Returns ``(h_kv, s // c)``, or ``(h_q, s // c)`` before the group
    reduction when ``per_query_head`` is set.
    """
    K = np.asarray(K_rope, dtype=np.float64)
    s = K.shape[1]
    if c < 1 or s % c:
        raise ParameterError(f"chunk size {c} does not divide sequence length {s}")
    W = attention_weights(Q, K)
    n = s // c
    per_head = np.zeros((W.shape[1], n))
    for h in range(W.shape[1]):
        for j in range(n):
            per_head[h, j] = math.fsum(W[:, h, j * c : (j + 1) * c].ravel()) / W.shape[0]
    if per_query_head:
        return per_head
    group = W.shape[1] // K.shape[0]
    return np.stack([per_head[g * group : (g + 1) * group].max(axis=0) for g in range(K.shape[0])])


def chunk_ranking(masses) -> np.ndarray:
    """Chunk ids per kv head, heaviest first; ties to the lower index."""
    masses = np.asarray(masses)
    return np.stack([np.argsort(-row, kind="stable") for row in masses])


def report(Q, K_rope, V, c: int, candidate=None, key_positions=None, q_positions=None) -> OracleReport:
    full = full_attention(Q, K_rope, V, key_positions, q_positions)
    masses = exact_chunk_masses(Q, K_rope, c)
    err = None
    if candidate is not None:
        err = float(np.max(np.abs(np.asarray(candidate, dtype=np.float64) - full)))
    return OracleReport(full, masses, chunk_ranking(masses), err)
