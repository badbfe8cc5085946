from dataclasses import asdict, dataclass
from typing import Optional

from .errors import ParameterError
from .linalg import RopeParams


@dataclass(frozen=True)
class ShadowConfig:
    """Hyperparameters of the prefill/decode pipeline.

    rank            SVD rank of the pre-RoPE key factorization
    chunk_size      tokens per chunk
    outliers        chunks per kv head kept exactly on the fast tier
    budget          chunks selected per kv head at each decode step
    local_window    most recent generated tokens kept resident
    cache_capacity  fast-cache chunks per kv head; defaults to ``budget``
    """

    rank: int = 160
    chunk_size: int = 8
    outliers: int = 48
    budget: int = 256
    local_window: int = 64
    num_q_heads: int = 32
    num_kv_heads: int = 8
    head_dim: int = 128
    rope_base: float = 10000.0
    rope_interleaved: bool = False
    cache_capacity: Optional[int] = None

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ParameterError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.outliers < 0:
            raise ParameterError(f"outliers must be >= 0, got {self.outliers}")
        if self.budget < 1:
            raise ParameterError(f"budget must be >= 1, got {self.budget}")
        if self.local_window < 0:
            raise ParameterError(f"local_window must be >= 0, got {self.local_window}")
        if self.num_q_heads < 1 or self.num_kv_heads < 1 or self.num_q_heads % self.num_kv_heads:
            raise ParameterError(
                f"num_q_heads ({self.num_q_heads}) must be a positive multiple of num_kv_heads ({self.num_kv_heads})"
            )
        if self.head_dim < 2 or self.head_dim % 2:
            raise ParameterError(f"head_dim must be even, got {self.head_dim}")
        if not 1 <= self.rank <= self.num_kv_heads * self.head_dim:
            raise ParameterError(f"rank must be in [1, {self.num_kv_heads * self.head_dim}], got {self.rank}")
        if self.cache_capacity is not None and self.cache_capacity < 0:
            raise ParameterError(f"cache_capacity must be >= 0, got {self.cache_capacity}")

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    @property
    def capacity(self) -> int:
        return self.budget if self.cache_capacity is None else self.cache_capacity

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_base, self.rope_interleaved)

    def as_dict(self) -> dict:
        return asdict(self)
