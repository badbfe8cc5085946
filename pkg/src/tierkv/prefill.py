"""Prefill: compress one layer's context KV into low-rank keys, landmarks,
exact outlier chunks and an offloaded value store."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .config import ShadowConfig
from .errors import DataError, ParameterError
from .kvstore import ChunkId, TieredValueStore, offload
from .linalg import TruncatedSVD, chunk_similarities, truncated_svd
from .tensorfile import read_tensor, write_tensor

log = logging.getLogger(__name__)


def _frozen(a, dtype=np.float32):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PrefillState:
    """Per-layer, per-sequence artifacts produced by :func:`prefill`.

    Per kv head ``h``:

    * ``landmarks[h]`` are the post-RoPE means of the non-outlier chunks,
      listed in ascending chunk order; ``landmark_chunk_ids[h]`` maps rows
      back to chunk indices.
    * ``outlier_keys[h]`` / ``outlier_values[h]`` hold the exact post-RoPE
      keys and values of the outlier chunks, with absolute token positions
      in ``outlier_positions[h]``.
    * values of the remaining full chunks live in ``value_store``.

    A ragged tail (``seq_len % chunk_size`` tokens) is kept exactly in
    ``tail_keys`` / ``tail_values`` and is never landmarked.
    """

    cfg: ShadowConfig
    layer: int
    seq_len: int
    low_rank: TruncatedSVD
    landmarks: np.ndarray
    landmark_chunk_ids: np.ndarray
    outlier_chunk_ids: np.ndarray
    outlier_keys: np.ndarray
    outlier_values: np.ndarray
    outlier_positions: np.ndarray
    tail_keys: np.ndarray
    tail_values: np.ndarray
    tail_positions: np.ndarray
    min_similarity: np.ndarray
    value_store: TieredValueStore

    @property
    def chunk_size(self) -> int:
        return self.cfg.chunk_size

    @property
    def n_full_chunks(self) -> int:
        return self.seq_len // self.cfg.chunk_size

    @property
    def n_chunks(self) -> int:
        return -(-self.seq_len // self.cfg.chunk_size)

    @property
    def has_tail(self) -> bool:
        return self.seq_len % self.cfg.chunk_size != 0

    @property
    def num_landmarks(self) -> int:
        return self.landmarks.shape[1]

    def chunk_positions(self, chunk_ids) -> np.ndarray:
        c = self.cfg.chunk_size
        ids = np.asarray(chunk_ids, dtype=np.int64)
        return (ids[:, None] * c + np.arange(c)[None, :]).reshape(-1)

    def head_factor(self, kv_head: int) -> np.ndarray:
        d = self.cfg.head_dim
        return self.low_rank.B[:, kv_head * d : (kv_head + 1) * d]

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        h = self.cfg.num_kv_heads
        tensors = {
            "A": self.low_rank.A[None, None],
            "B": self.low_rank.B[None, None],
            "singular_values": self.low_rank.singular_values[None, None, None],
            "landmarks": self.landmarks[None],
            "landmark_chunk_ids": self.landmark_chunk_ids[None, None],
            "outlier_chunk_ids": self.outlier_chunk_ids[None, None],
            "outlier_keys": self.outlier_keys[None],
            "outlier_values": self.outlier_values[None],
            "tail_keys": self.tail_keys[None],
            "tail_values": self.tail_values[None],
            "min_similarity": self.min_similarity[None, None],
        }
        for name, arr in tensors.items():
            write_tensor(directory / f"{name}.skvt", arr)
        self.value_store.save(directory / "slow_tier")
        meta = {"cfg": self.cfg.as_dict(), "layer": self.layer, "seq_len": self.seq_len, "kv_heads": h}
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "PrefillState":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        cfg = ShadowConfig(**meta["cfg"])
        t = {p.stem: read_tensor(p) for p in directory.glob("*.skvt")}
        seq_len = meta["seq_len"]
        c = cfg.chunk_size
        outlier_ids = t["outlier_chunk_ids"][0, 0].astype(np.int64)
        n_full = seq_len // c
        tail_pos = np.arange(n_full * c, seq_len, dtype=np.int64)
        return cls(
            cfg=cfg,
            layer=meta["layer"],
            seq_len=seq_len,
            low_rank=TruncatedSVD(
                _frozen(t["A"][0, 0]), _frozen(t["B"][0, 0]), t["singular_values"][0, 0, 0].astype(np.float64)
            ),
            landmarks=_frozen(t["landmarks"][0]),
            landmark_chunk_ids=_frozen(t["landmark_chunk_ids"][0, 0], np.int64),
            outlier_chunk_ids=_frozen(outlier_ids, np.int64),
            outlier_keys=_frozen(t["outlier_keys"][0]),
            outlier_values=_frozen(t["outlier_values"][0]),
            outlier_positions=_frozen(
                np.stack([(ids[:, None] * c + np.arange(c)).reshape(-1) for ids in outlier_ids])
                if outlier_ids.size
                else np.zeros((cfg.num_kv_heads, 0)),
                np.int64,
            ),
            tail_keys=_frozen(t["tail_keys"][0]),
            tail_values=_frozen(t["tail_values"][0]),
            tail_positions=_frozen(tail_pos, np.int64),
            min_similarity=_frozen(t["min_similarity"][0, 0], np.float64),
            value_store=TieredValueStore.load(directory / "slow_tier", capacity=cfg.capacity),
        )


def select_outliers(min_similarity, o: int) -> np.ndarray:
    """Indices of the ``o`` chunks with the smallest minimum similarity.

    Ties resolve to the lower chunk index. Returned in ascending order.
    """
    order = np.argsort(min_similarity, kind="stable")
    return np.sort(order[:o])


def _check_inputs(K_pre, K_rope, V, cfg):
    arrs = []
    for name, x in (("K_pre", K_pre), ("K_rope", K_rope), ("V", V)):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 3:
            raise DataError(f"{name} must have shape (kv_heads, seq, head_dim), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError(f"{name} contains non-finite entries")
        arrs.append(x)
    K_pre, K_rope, V = arrs
    if not (K_pre.shape == K_rope.shape == V.shape):
        raise DataError(f"shape mismatch: K_pre {K_pre.shape}, K_rope {K_rope.shape}, V {V.shape}")
    h, s, d = K_pre.shape
    if h != cfg.num_kv_heads or d != cfg.head_dim:
        raise DataError(f"inputs have {h} heads x dim {d}; config expects {cfg.num_kv_heads} x {cfg.head_dim}")
    return K_pre, K_rope, V


def prefill_sequence(K_pre, K_rope, V, cfg: ShadowConfig, layer: int = 0) -> PrefillState:
    """Prefill one sequence. Inputs have shape ``(kv_heads, seq, head_dim)``."""
    K_pre, K_rope, V = _check_inputs(K_pre, K_rope, V, cfg)
    h, s, d = K_pre.shape
    c, o, r = cfg.chunk_size, cfg.outliers, cfg.rank
    if s < c:
        raise ParameterError(f"sequence length {s} shorter than chunk size {c}")
    if r > min(s, h * d):
        raise ParameterError(f"rank {r} exceeds min(seq_len, kv_heads*head_dim) = {min(s, h * d)}")
    n_full = s // c
    if o >= n_full:
        raise ParameterError(f"{o} outlier chunks leave no landmarks among {n_full} full chunks")

    flat = K_pre.transpose(1, 0, 2).reshape(s, h * d)
    low_rank = truncated_svd(flat, r)

    landmarks, lm_ids, out_ids = [], [], []
    out_k, out_v, out_pos, min_sims = [], [], [], []
    blocks = {}
    for g in range(h):
        means, sims = chunk_similarities(K_rope[g], c)
        mins = sims.min(axis=1)
        outliers = select_outliers(mins, o)
        keep = np.setdiff1d(np.arange(n_full), outliers)
        landmarks.append(means[keep].astype(np.float32))
        lm_ids.append(keep)
        out_ids.append(outliers)
        pos = (outliers[:, None] * c + np.arange(c)).reshape(-1)
        out_pos.append(pos)
        out_k.append(K_rope[g, pos])
        out_v.append(V[g, pos])
        min_sims.append(mins)
        for j in keep:
            blocks[ChunkId(layer, g, int(j))] = V[g, j * c : (j + 1) * c]

    tail = np.arange(n_full * c, s, dtype=np.int64)
    if tail.size:
        log.debug("ragged tail of %d tokens kept exactly on the fast tier", tail.size)

    return PrefillState(
        cfg=cfg,
        layer=layer,
        seq_len=s,
        low_rank=TruncatedSVD(_frozen(low_rank.A), _frozen(low_rank.B), low_rank.singular_values),
        landmarks=_frozen(np.stack(landmarks)),
        landmark_chunk_ids=_frozen(np.stack(lm_ids), np.int64),
        outlier_chunk_ids=_frozen(np.stack(out_ids), np.int64),
        outlier_keys=_frozen(np.stack(out_k)),
        outlier_values=_frozen(np.stack(out_v)),
        outlier_positions=_frozen(np.stack(out_pos), np.int64),
        tail_keys=_frozen(K_rope[:, tail]),
        tail_values=_frozen(V[:, tail]),
        tail_positions=_frozen(tail, np.int64),
        min_similarity=_frozen(np.stack(min_sims), np.float64),
        value_store=offload(blocks, capacity=cfg.capacity, chunk_shape=(c, d)),
    )


def prefill(K_pre, K_rope, V, cfg: ShadowConfig, layer: int = 0):
    """Run prefill for a batch ``(b, kv_heads, seq, head_dim)`` or a single sequence.

    Batched input returns one independent :class:`PrefillState` per sequence.
    """
    K_pre = np.asarray(K_pre)
    if K_pre.ndim == 4:
        return [prefill_sequence(K_pre[i], K_rope[i], V[i], cfg, layer) for i in range(K_pre.shape[0])]
    return prefill_sequence(K_pre, K_rope, V, cfg, layer)


def reconstruct_chunk_keys(state: PrefillState, kv_head: int, chunk_ids):
    """Rebuild post-RoPE keys of non-outlier chunks from the low-rank factors.

    Returns ``(keys, positions)`` with ``len(chunk_ids) * chunk_size`` rows,
    chunks in the order given.
    """
    ids = np.asarray(chunk_ids, dtype=np.int64).reshape(-1)
    if not 0 <= kv_head < state.cfg.num_kv_heads:
        raise ParameterError(f"kv_head {kv_head} out of range")
    bad = ids[(ids < 0) | (ids >= state.n_full_chunks)]
    if bad.size:
        raise ParameterError(f"chunk ids {bad.tolist()} are not full context chunks")
    clash = np.intersect1d(ids, state.outlier_chunk_ids[kv_head])
    if clash.size:
        raise ParameterError(f"chunks {clash.tolist()} are outliers and are stored exactly")
    pos = state.chunk_positions(ids)
    pre = _kernels.gather_matmul(state.low_rank.A, state.head_factor(kv_head), pos)
    rp = state.cfg.rope
    return _kernels.rope(pre, pos, rp.inv_freq(), rp.interleaved), pos
