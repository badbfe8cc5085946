"""Sparse decode: landmark scoring, per-kv-head top-k chunk selection,
tiered value gather, low-rank key reconstruction and exact attention over
the assembled KV set."""

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels
from .config import ShadowConfig
from .errors import DataError, ParameterError, StateError
from .kvstore import ChunkId, TierStats
from .prefill import PrefillState, reconstruct_chunk_keys

STAGE_ORDERS = ("serial", "values_first", "keys_first", "concurrent")


class LocalWindow:
    """Ring buffer of the most recent generated tokens' post-RoPE keys and values.

    Positions are assigned on append starting at ``start_position`` (normally
    the context length). Once full, the oldest token is dropped for good.
    """

    def __init__(self, capacity: int, num_kv_heads: int, head_dim: int, start_position: int):
        if capacity < 0:
            raise ParameterError(f"window capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        self.next_position = int(start_position)
        self._buf = deque(maxlen=capacity) if capacity else None

    @classmethod
    def for_state(cls, state: PrefillState) -> "LocalWindow":
        cfg = state.cfg
        return cls(cfg.local_window, cfg.num_kv_heads, cfg.head_dim, state.seq_len)

    def __len__(self):
        return len(self._buf) if self._buf is not None else 0

    @property
    def positions(self) -> np.ndarray:
        if not len(self):
            return np.zeros(0, dtype=np.int64)
        return np.array([p for p, _, _ in self._buf], dtype=np.int64)

    def keys(self, kv_head: int) -> np.ndarray:
        if not len(self):
            return np.zeros((0, self.head_dim), dtype=np.float32)
        return np.stack([k[kv_head] for _, k, _ in self._buf])

    def values(self, kv_head: int) -> np.ndarray:
        if not len(self):
            return np.zeros((0, self.head_dim), dtype=np.float32)
        return np.stack([v[kv_head] for _, _, v in self._buf])


def append_generated(window: LocalWindow, k_row, v_row) -> LocalWindow:
    """Push one generated token (post-RoPE key and value, ``(kv_heads, head_dim)`` each)."""
    shape = (window.num_kv_heads, window.head_dim)
    k = np.array(k_row, dtype=np.float32).reshape(shape)
    v = np.array(v_row, dtype=np.float32).reshape(shape)
    if window._buf is not None:
        window._buf.append((window.next_position, k, v))
    window.next_position += 1
    return window


@dataclass
class DecodeOutput:
    attn_out: np.ndarray
    selected_chunks: np.ndarray
    cache_stats_delta: TierStats
    score_trace: Optional[np.ndarray] = None
    key_positions: list = field(default_factory=list)
    weights: Optional[list] = None

    def weight_of(self, position: int, q_head: int, row: int = 0, group_size: int = 1) -> float:
        """Attention weight a query head put on the token at ``position`` (0 if not attended)."""
        if self.weights is None:
            raise StateError("decode_step was run without return_weights=True")
        g, i = divmod(q_head, group_size)
        hit = np.nonzero(self.key_positions[g] == position)[0]
        if not hit.size:
            return 0.0
        return float(self.weights[g][i, row, hit[0]])

    def trace_record(self, step: int, **extra) -> dict:
        rec = {
            "step": step,
            "selected_chunks": self.selected_chunks.tolist(),
            "hit_rate": self.cache_stats_delta.hit_rate,
            "chunks_requested": self.cache_stats_delta.chunks_requested,
            "chunks_hit": self.cache_stats_delta.chunks_hit,
            "bytes_fetched": self.cache_stats_delta.bytes_fetched_total,
        }
        rec.update(extra)
        return rec


def _as_queries(Q, cfg: ShadowConfig) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float32)
    if Q.ndim == 2:
        Q = Q[None]
    if Q.ndim != 3 or Q.shape[1:] != (cfg.num_q_heads, cfg.head_dim):
        raise DataError(f"queries must be (s_q, {cfg.num_q_heads}, {cfg.head_dim}), got {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise DataError("queries contain non-finite entries")
    return Q


def select_chunks(Q, state: PrefillState, cfg: Optional[ShadowConfig] = None, return_scores: bool = False):
    """Top-``budget`` chunk ids per kv head, highest landmark score first.

    Scores are softmax(Q L^T / sqrt(d)) over the landmarks, summed over
    query rows, then maxed over the query heads that share a kv head.
    Equal scores resolve to the lower chunk index.
    """
    cfg = cfg or state.cfg
    Q = _as_queries(Q, cfg)
    k = cfg.budget
    m = state.num_landmarks
    if k > m:
        raise ParameterError(f"budget {k} exceeds the {m} available landmarks")
    G = cfg.group_size
    scale = 1.0 / math.sqrt(cfg.head_dim)
    picks, scores = [], []
    for g in range(cfg.num_kv_heads):
        Qg = Q[:, g * G : (g + 1) * G, :].transpose(1, 0, 2)
        s2 = _kernels.landmark_scores(Qg, state.landmarks[g], scale)
        order = np.argsort(-s2, kind="stable")[:k]
        picks.append(state.landmark_chunk_ids[g][order])
        scores.append(s2)
    selected = np.stack(picks)
    if return_scores:
        return selected, np.stack(scores)
    return selected


def _gather_values(state, selected):
    ids = [ChunkId(state.layer, g, int(j)) for g, row in enumerate(selected) for j in row]
    blocks, _ = state.value_store.fetch(ids)
    d = state.cfg.head_dim
    out = {}
    for g, row in enumerate(selected):
        if len(row):
            out[g] = np.concatenate([blocks[ChunkId(state.layer, g, int(j))] for j in row])
        else:
            out[g] = np.zeros((0, d), dtype=np.float32)
    return out


def _reconstruct_keys(state, selected):
    return {g: reconstruct_chunk_keys(state, g, row) for g, row in enumerate(selected)}


def _query_positions(state, window, s_q, q_positions):
    if q_positions is not None:
        q = np.asarray(q_positions, dtype=np.int64).reshape(-1)
        if q.shape != (s_q,):
            raise DataError(f"need {s_q} query positions, got {q.shape}")
        return q
    nxt = window.next_position if window is not None else state.seq_len
    q = nxt - s_q + np.arange(s_q, dtype=np.int64)
    return np.maximum(q, state.seq_len - 1)


def decode_step(
    Q,
    state: PrefillState,
    window: Optional[LocalWindow] = None,
    cfg: Optional[ShadowConfig] = None,
    *,
    q_positions=None,
    order: str = "serial",
    return_weights: bool = False,
) -> DecodeOutput:
    """One sparse attention step for queries ``Q`` of shape ``(s_q, h_q, d)``.

    Attends exactly over outlier chunks, the selected chunks (values fetched
    from the tiered store, keys rebuilt from the low-rank factors), the
    ragged context tail and the local window. ``order`` only changes when the
    value gather and key reconstruction stages run; the result is identical.
    """
    cfg = cfg or state.cfg
    if order not in STAGE_ORDERS:
        raise ParameterError(f"order must be one of {STAGE_ORDERS}, got {order!r}")
    Q = _as_queries(Q, cfg)
    s_q = Q.shape[0]
    q_pos = _query_positions(state, window, s_q, q_positions)

    before = state.value_store.stats_snapshot()
    selected, s2 = select_chunks(Q, state, cfg, return_scores=True)

    if order == "concurrent":
        with ThreadPoolExecutor(max_workers=2) as pool:
            fv = pool.submit(_gather_values, state, selected)
            fk = pool.submit(_reconstruct_keys, state, selected)
            values, keys = fv.result(), fk.result()
    elif order == "keys_first":
        keys = _reconstruct_keys(state, selected)
        values = _gather_values(state, selected)
    else:
        values = _gather_values(state, selected)
        keys = _reconstruct_keys(state, selected)

    G = cfg.group_size
    scale = 1.0 / math.sqrt(cfg.head_dim)
    d = cfg.head_dim
    out = np.zeros((s_q, cfg.num_q_heads, d), dtype=np.float32)
    all_pos, all_w = [], []
    for g in range(cfg.num_kv_heads):
        k_sparse, p_sparse = keys[g]
        parts_k = [state.outlier_keys[g], k_sparse, state.tail_keys[g]]
        parts_v = [state.outlier_values[g], values[g], state.tail_values[g]]
        parts_p = [state.outlier_positions[g], p_sparse, state.tail_positions]
        if window is not None:
            parts_k.append(window.keys(g))
            parts_v.append(window.values(g))
            parts_p.append(window.positions)
        K = np.concatenate(parts_k)
        V = np.concatenate(parts_v)
        P = np.concatenate(parts_p)
        if K.shape[0] == 0:
            raise StateError("assembled KV set is empty")
        srt = np.argsort(P, kind="stable")
        K, V, P = K[srt], V[srt], P[srt]
        if np.any(P[0] > q_pos):
            raise StateError("a query row has no visible keys")
        Qg = Q[:, g * G : (g + 1) * G, :].transpose(1, 0, 2).reshape(G * s_q, d)
        o, w = _kernels.attend(Qg, np.tile(q_pos, G), K, V, P, scale)
        out[:, g * G : (g + 1) * G, :] = o.reshape(G, s_q, d).transpose(1, 0, 2)
        all_pos.append(P)
        if return_weights:
            all_w.append(w.reshape(G, s_q, -1))

    after = state.value_store.stats_snapshot()
    # byte gauges are point-in-time; counters are per-step differences
    delta = replace(after - before, slow_tier_bytes=after.slow_tier_bytes, fast_tier_bytes=after.fast_tier_bytes)
    return DecodeOutput(
        attn_out=out.reshape(s_q, cfg.num_q_heads * d),
        selected_chunks=selected,
        cache_stats_delta=delta,
        score_trace=s2,
        key_positions=all_pos,
        weights=all_w if return_weights else None,
    )
