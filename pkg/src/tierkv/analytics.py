"""Equivalent-bandwidth model, memory footprint accounting and selection metrics."""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ParameterError
from .kvstore import BYTES_PER_FLOAT

GB = 1e9
TB = 1e12


@dataclass(frozen=True)
class BandwidthParams:
    """Inputs of the equivalent-bandwidth model.

    bytes_per_vector  size of one K or V vector (cancels out of the ratio)
    seq_len           context tokens S
    chunk_size        tokens per chunk C
    budget            selected chunks K
    outliers          static outlier chunks O
    hit_rate          fraction of selected chunks already resident, alpha
    gpu_bandwidth     fast-tier bytes/s
    pcie_bandwidth    slow-to-fast link bytes/s
    """

    seq_len: int = 131072
    chunk_size: int = 8
    budget: int = 256
    outliers: int = 48
    hit_rate: float = 0.6
    gpu_bandwidth: float = 2 * TB
    pcie_bandwidth: float = 31.5 * GB
    bytes_per_vector: float = 256.0

    def __post_init__(self):
        for name in ("seq_len", "chunk_size", "budget", "gpu_bandwidth", "pcie_bandwidth", "bytes_per_vector"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.outliers < 0:
            raise ParameterError(f"outliers must be >= 0, got {self.outliers}")
        if not 0.0 <= self.hit_rate <= 1.0:
            raise ParameterError(f"hit_rate must lie in [0, 1], got {self.hit_rate}")

    def as_dict(self) -> dict:
        return asdict(self)


def equivalent_bandwidth(p: BandwidthParams) -> float:
    """Bytes/s a dense read of the full KV cache would need to match the sparse pipeline.

    Per step the pipeline reads S/C landmark vectors and 2(K+O)C KV vectors
    from the fast tier and moves (1-alpha)KC value vectors over the link;
    link time is expressed in fast-tier vector-equivalents. Key
    reconstruction is assumed hidden behind the value transfer.
    """
    S, C, K, O = p.seq_len, p.chunk_size, p.budget, p.outliers
    denom = S / C + 2 * (K + O) * C + (1.0 - p.hit_rate) * K * C * p.gpu_bandwidth / p.pcie_bandwidth
    return 2 * S * p.gpu_bandwidth / denom


def step_time(p: BandwidthParams) -> float:
    """Seconds per decode step implied by the same byte counts."""
    M = p.bytes_per_vector
    gpu = M * (p.seq_len / p.chunk_size + 2 * (p.budget + p.outliers) * p.chunk_size) / p.gpu_bandwidth
    link = M * (1.0 - p.hit_rate) * p.budget * p.chunk_size / p.pcie_bandwidth
    return gpu + link


def key_compression(rank: int, key_width: int) -> float:
    """Ratio of full pre-RoPE key bytes per token (``key_width`` floats) to low-rank bytes (``rank`` floats)."""
    if rank < 1 or key_width < 1:
        raise ParameterError("rank and key_width must be positive")
    return key_width / rank


@dataclass(frozen=True)
class FootprintReport:
    lowrank_a_bytes: int
    factor_b_bytes: int
    landmark_bytes: int
    outlier_kv_bytes: int
    tail_kv_bytes: int
    window_kv_bytes: int
    cache_resident_bytes: int
    slow_tier_bytes: int
    full_kv_bytes: int
    full_key_bytes: int

    @property
    def fast_tier_bytes(self) -> int:
        return (
            self.lowrank_a_bytes
            + self.factor_b_bytes
            + self.landmark_bytes
            + self.outlier_kv_bytes
            + self.tail_kv_bytes
            + self.window_kv_bytes
            + self.cache_resident_bytes
        )

    @property
    def fast_tier_value_bytes(self) -> int:
        """Value bytes held on the fast tier (outlier/tail/window halves plus cached chunks)."""
        return (self.outlier_kv_bytes + self.tail_kv_bytes + self.window_kv_bytes) // 2 + self.cache_resident_bytes

    @property
    def key_compression(self) -> float:
        return self.full_key_bytes / self.lowrank_a_bytes

    @property
    def fast_tier_compression(self) -> float:
        return self.full_kv_bytes / self.fast_tier_bytes

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(
            fast_tier_bytes=self.fast_tier_bytes,
            fast_tier_value_bytes=self.fast_tier_value_bytes,
            key_compression=self.key_compression,
            fast_tier_compression=self.fast_tier_compression,
        )
        return d


def footprint(state, window=None) -> FootprintReport:
    """Byte-exact accounting of where a prefilled layer's KV data lives."""
    f = BYTES_PER_FLOAT
    cfg = state.cfg
    win_tokens = len(window) if window is not None else 0
    return FootprintReport(
        lowrank_a_bytes=state.low_rank.A.size * f,
        factor_b_bytes=state.low_rank.B.size * f,
        landmark_bytes=state.landmarks.size * f,
        outlier_kv_bytes=(state.outlier_keys.size + state.outlier_values.size) * f,
        tail_kv_bytes=(state.tail_keys.size + state.tail_values.size) * f,
        window_kv_bytes=2 * win_tokens * cfg.num_kv_heads * cfg.head_dim * f,
        cache_resident_bytes=state.value_store.stats_snapshot().fast_tier_bytes,
        slow_tier_bytes=state.value_store.stats_snapshot().slow_tier_bytes,
        full_kv_bytes=2 * state.seq_len * cfg.num_kv_heads * cfg.head_dim * f,
        full_key_bytes=state.seq_len * cfg.num_kv_heads * cfg.head_dim * f,
    )


def selection_recall(selected, oracle_ranking, k: Optional[int] = None) -> float:
    """|selected & oracle top-k| / k for one kv head."""
    selected = np.asarray(selected).reshape(-1)
    ranking = np.asarray(oracle_ranking).reshape(-1)
    k = len(selected) if k is None else k
    if k < 1 or k > len(ranking):
        raise ParameterError(f"k={k} outside [1, {len(ranking)}]")
    return len(set(selected.tolist()) & set(ranking[:k].tolist())) / k


def restrict_ranking(ranking, allowed) -> np.ndarray:
    """Drop chunk ids not in ``allowed`` while keeping order."""
    allowed = set(np.asarray(allowed).tolist())
    return np.array([j for j in np.asarray(ranking).tolist() if j in allowed], dtype=np.int64)


def mean_recall(selected, ranking_per_head, landmark_ids=None) -> float:
    """Average recall over kv heads, optionally restricting the oracle to landmarked chunks."""
    vals = []
    for g, sel in enumerate(np.asarray(selected)):
        rank = ranking_per_head[g]
        if landmark_ids is not None:
            rank = restrict_ranking(rank, landmark_ids[g])
        vals.append(selection_recall(sel, rank, len(sel)))
    return float(np.mean(vals))
