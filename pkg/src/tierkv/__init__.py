"""Low-rank key storage, offloaded values and landmark-based sparse attention
for long-context decoding, simulated on the CPU."""

from .config import ShadowConfig
from .decode import DecodeOutput, LocalWindow, append_generated, decode_step, select_chunks
from .errors import ChunkNotFoundError, DataError, FormatError, ParameterError, StateError, TierKVError
from .kvstore import ChunkId, TieredValueStore, TierStats, offload
from .prefill import PrefillState, prefill, reconstruct_chunk_keys

__version__ = "0.1.0"

__all__ = [
    "ChunkId",
    "ChunkNotFoundError",
    "DataError",
    "DecodeOutput",
    "FormatError",
    "LocalWindow",
    "ParameterError",
    "PrefillState",
    "ShadowConfig",
    "StateError",
    "TierKVError",
    "TierStats",
    "TieredValueStore",
    "append_generated",
    "decode_step",
    "offload",
    "prefill",
    "reconstruct_chunk_keys",
    "select_chunks",
]
