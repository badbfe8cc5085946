"""Deterministic synthetic workloads.

Every generator is a pure function of its :class:`GeneratorSpec`; random
draws come from :class:`~tierkv.rng.CounterRNG` with one stream per purpose,
so adding a draw to one component never shifts another.
"""

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DataError, ParameterError
from .linalg import RopeParams, rope_apply, rope_invert
from .rng import CounterRNG

KINDS = ("shared-subspace", "needle", "iid-gaussian", "multi-turn-needle", "concentrated")

# stream ids
_S_BASIS, _S_CTX, _S_EXT, _S_INDEP, _S_NOISE, _S_VALUES, _S_QUERY, _S_NEEDLE, _S_HOT = range(1, 10)

MAX_RETRIES = 16


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "needle"
    seed: int = 0
    seq_len: int = 4096
    head_dim: int = 64
    num_kv_heads: int = 2
    num_q_heads: int = 8
    query_len: int = 1
    intrinsic_rank: int = 16
    noise: float = 0.1
    extension_len: int = 512
    needle_position: Optional[int] = None
    needle_strength: float = 20.0
    turns: int = 1
    chunk_size: int = 8
    hot_chunks: int = 16
    rope_base: float = 10000.0
    rope_interleaved: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown generator kind {self.kind!r}; expected one of {KINDS}")
        if self.noise < 0:
            raise ParameterError(f"noise level must be >= 0, got {self.noise}")
        if self.seq_len < 1 or self.head_dim < 2 or self.head_dim % 2:
            raise ParameterError("seq_len must be positive and head_dim even")
        if self.num_q_heads % self.num_kv_heads:
            raise ParameterError("num_q_heads must be a multiple of num_kv_heads")
        if not 1 <= self.intrinsic_rank <= self.num_kv_heads * self.head_dim:
            raise ParameterError(f"intrinsic_rank must be in [1, {self.num_kv_heads * self.head_dim}]")
        if self.needle_position is not None and not 0 <= self.needle_position < self.seq_len:
            raise ParameterError(f"needle position {self.needle_position} outside [0, {self.seq_len})")

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.head_dim, self.rope_base, self.rope_interleaved)

    def rng(self, stream: int, retry: int = 0) -> CounterRNG:
        return CounterRNG(self.seed, stream + 16 * retry)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class WorkloadCase:
    """One layer's context KV plus decode queries.

    ``K_pre``/``K_rope``/``V`` have shape ``(kv_heads, seq, head_dim)``;
    ``Q`` is ``(turns, s_q, q_heads, head_dim)`` for multi-turn workloads and
    ``(s_q, q_heads, head_dim)`` otherwise.
    """

    spec: GeneratorSpec
    K_pre: np.ndarray
    K_rope: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    needle_positions: list = field(default_factory=list)
    hot_chunks: list = field(default_factory=list)
    retries: int = 0


def _heads(rows, h, d):
    """(s, h*d) -> (h, s, d)"""
    return np.ascontiguousarray(rows.reshape(rows.shape[0], h, d).transpose(1, 0, 2), dtype=np.float32)


def _rope_heads(K, rp):
    pos = np.arange(K.shape[1])
    return np.stack([rope_apply(K[g], pos, rp) for g in range(K.shape[0])])


def _low_rank_rows(rng, basis, n, noise, noise_rng):
    r, D = basis.shape
    coeff = rng.normal((n, r), scale=1.0 / math.sqrt(r))
    rows = coeff @ basis
    if noise > 0:
        rows = rows + noise_rng.normal((n, D), scale=noise / math.sqrt(D))
    return rows


def gen_shared_subspace(spec: GeneratorSpec):
    """Context, extension and independent key matrices, each ``rows x D`` with ``D = kv_heads*head_dim``.

    Context and extension rows share one hidden rank-``intrinsic_rank``
    subspace; the independent sequence draws a fresh one. Each row is a
    Gaussian combination of the basis (unit expected norm) plus isotropic
    noise of total expected norm ``noise``.
    """
    D = spec.num_kv_heads * spec.head_dim
    r = spec.intrinsic_rank
    shared = spec.rng(_S_BASIS).orthonormal(D, r)
    other = spec.rng(_S_INDEP).orthonormal(D, r)
    noise_rng = spec.rng(_S_NOISE)
    ctx = _low_rank_rows(spec.rng(_S_CTX), shared, spec.seq_len, spec.noise, noise_rng)
    ext = _low_rank_rows(spec.rng(_S_EXT), shared, spec.extension_len, spec.noise, noise_rng)
    ind = _low_rank_rows(spec.rng(_S_INDEP + 100), other, spec.seq_len, spec.noise, noise_rng)
    return ctx.astype(np.float32), ext.astype(np.float32), ind.astype(np.float32)


def gen_iid_gaussian(spec: GeneratorSpec) -> WorkloadCase:
    h, s, d = spec.num_kv_heads, spec.seq_len, spec.head_dim
    K_pre = spec.rng(_S_CTX).normal((h, s, d), scale=1.0 / math.sqrt(d)).astype(np.float32)
    V = spec.rng(_S_VALUES).normal((h, s, d)).astype(np.float32)
    Q = spec.rng(_S_QUERY).normal((spec.query_len, spec.num_q_heads, d)).astype(np.float32)
    return WorkloadCase(spec, K_pre, _rope_heads(K_pre, spec.rope), V, Q)


def _haystack(spec, retry):
    h, s, d = spec.num_kv_heads, spec.seq_len, spec.head_dim
    D = h * d
    basis = spec.rng(_S_BASIS, retry).orthonormal(D, spec.intrinsic_rank)
    rows = _low_rank_rows(spec.rng(_S_CTX, retry), basis, s, spec.noise, spec.rng(_S_NOISE, retry))
    K_pre = _heads(rows, h, d)
    V = spec.rng(_S_VALUES, retry).normal((h, s, d)).astype(np.float32)
    return basis, K_pre, V


def _plant(spec, K_pre, basis, positions, retry):
    """Scale planted keys and build one query per needle.

    The needle key is a unit direction of the shared subspace, so low-rank
    storage keeps it exactly. Query heads of kv group ``g`` point along the
    rotated needle key of that group; the needle logit (after the 1/sqrt(d)
    scale) is ``needle_strength`` and background logits have unit spread.
    """
    h, s, d = K_pre.shape
    rp = spec.rope
    G = spec.num_q_heads // h
    rng = spec.rng(_S_NEEDLE, retry)
    qrng = spec.rng(_S_QUERY, retry)
    pos_all = np.arange(s)
    K_rope = np.stack([rope_apply(K_pre[g], pos_all, rp) for g in range(h)])
    bg_norm = float(np.sqrt(np.mean(np.sum(K_rope.astype(np.float64) ** 2, axis=2))))
    queries = []
    for p in positions:
        u = rng.normal(basis.shape[0]) @ basis
        u /= np.linalg.norm(u)
        unit = _heads(u[None, :], h, d)[:, 0, :]
        Qn = np.zeros((spec.query_len, spec.num_q_heads, d))
        for g in range(h):
            dir_rope = rope_apply(unit[g][None], [p], rp)[0].astype(np.float64)
            dir_rope /= np.linalg.norm(dir_rope)
            # |q| chosen so that background logits q.k/sqrt(d) have unit spread
            q_norm = d / max(bg_norm, 1e-12)
            amp = spec.needle_strength * math.sqrt(d) / q_norm
            key_pre = unit[g] / np.linalg.norm(unit[g]) * amp
            K_pre[g, p] = key_pre
            K_rope[g, p] = rope_apply(key_pre[None], [p], rp)[0]
            for j in range(G):
                jitter = qrng.normal((spec.query_len, d), scale=0.01 * q_norm / math.sqrt(d))
                Qn[:, g * G + j, :] = q_norm * dir_rope[None, :] + jitter
        queries.append(Qn.astype(np.float32))
    return K_pre, K_rope.astype(np.float32), queries


def _needle_mass(Q, K_rope, p, c):
    """Exact softmax mass on the chunk holding position ``p``, minimum over heads."""
    h, s, d = K_rope.shape
    G = Q.shape[1] // h
    j = p // c
    lo, hi = j * c, min((j + 1) * c, s)
    worst = 1.0
    for qh in range(Q.shape[1]):
        logits = K_rope[qh // G].astype(np.float64) @ Q[:, qh, :].astype(np.float64).T / math.sqrt(d)
        logits -= logits.max(axis=0, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=0, keepdims=True)
        worst = min(worst, float(w[lo:hi].sum(axis=0).min()))
    return worst


def _needles(spec, positions) -> WorkloadCase:
    for retry in range(MAX_RETRIES):
        basis, K_pre, V = _haystack(spec, retry)
        K_pre, K_rope, queries = _plant(spec, K_pre, basis, positions, retry)
        masses = [_needle_mass(q, K_rope, p, spec.chunk_size) for q, p in zip(queries, positions)]
        if min(masses) > 0.5:
            Q = queries[0] if spec.kind == "needle" else np.stack(queries)
            return WorkloadCase(spec, K_pre, K_rope, V, Q, needle_positions=list(positions), retries=retry)
    raise DataError(f"needle self-check failed after {MAX_RETRIES} attempts (strength {spec.needle_strength})")


def gen_needle(spec: GeneratorSpec) -> WorkloadCase:
    """Haystack of shared-subspace keys with one planted high-affinity key.

    Self-check: the exact attention mass of every query head on the needle's
    chunk must exceed 0.5, otherwise the haystack is redrawn.
    """
    p = spec.needle_position if spec.needle_position is not None else spec.seq_len // 2
    return _needles(replace(spec, kind="needle"), [p])


def gen_multi_turn_needle(spec: GeneratorSpec) -> WorkloadCase:
    """``turns`` needles at distinct positions, one query set per turn (``Q`` is 4-D)."""
    if spec.turns < 1:
        raise ParameterError("turns must be >= 1")
    c = spec.chunk_size
    n_chunks = spec.seq_len // c
    if spec.turns > n_chunks:
        raise ParameterError(f"{spec.turns} turns need distinct chunks, only {n_chunks} available")
    chunks = np.sort(spec.rng(_S_HOT).choice(n_chunks, spec.turns))
    offs = spec.rng(_S_HOT + 100).integers(c, spec.turns)
    positions = [int(j * c + o) for j, o in zip(chunks, offs)]
    return _needles(replace(spec, kind="multi-turn-needle"), positions)


def gen_concentrated(spec: GeneratorSpec) -> WorkloadCase:
    """Chunk-coherent keys where a few hot chunks draw most of the attention.

    Keys are built post-RoPE: every chunk has a topic vector and each token
    is its topic plus small isotropic noise. Along a per-kv-head hot
    direction, background topics have N(0, 1) logits and ``hot_chunks``
    random chunks have logits uniform in [3, 7]. Pre-RoPE keys are the
    inverse rotation.
    """
    h, s, d, c = spec.num_kv_heads, spec.seq_len, spec.head_dim, spec.chunk_size
    if s % c:
        raise ParameterError(f"chunk size {c} must divide seq_len {s} for the concentrated workload")
    n = s // c
    if spec.hot_chunks > n:
        raise ParameterError(f"{spec.hot_chunks} hot chunks > {n} chunks")
    G = spec.num_q_heads // h
    sq = math.sqrt(d)
    trng, krng, hrng, qrng = (spec.rng(x) for x in (_S_BASIS, _S_NOISE, _S_HOT, _S_QUERY))
    K_rope = np.zeros((h, s, d))
    Q = np.zeros((spec.query_len, spec.num_q_heads, d))
    hot_sets = []
    for g in range(h):
        e = trng.normal(d)
        e /= np.linalg.norm(e)
        along = trng.normal(n)
        hot = np.sort(hrng.choice(n, spec.hot_chunks))
        along[hot] = 3.0 + 4.0 * hrng.uniform(spec.hot_chunks)
        perp = trng.normal((n, d), scale=2.0 / sq)
        perp -= np.outer(perp @ e, e)
        topics = perp + np.outer(along, e)
        tok = krng.normal((n, c, d), scale=0.3 / sq)
        K_rope[g] = (topics[:, None, :] + tok).reshape(s, d)
        for j in range(G):
            scale = sq * (0.8 + 0.4 * qrng.uniform(1)[0])
            Q[:, g * G + j, :] = scale * e[None, :] + qrng.normal((spec.query_len, d), scale=0.02)
        hot_sets.append(hot.tolist())
    K_rope = K_rope.astype(np.float32)
    rp = spec.rope
    pos = np.arange(s)
    K_pre = np.stack([rope_invert(K_rope[g], pos, rp) for g in range(h)])
    # the post-RoPE keys actually attended are the forward rotation of the stored pre-RoPE keys
    K_rope = np.stack([rope_apply(K_pre[g], pos, rp) for g in range(h)])
    V = spec.rng(_S_VALUES).normal((h, s, d)).astype(np.float32)
    return WorkloadCase(spec, K_pre, K_rope, V, Q.astype(np.float32), hot_chunks=hot_sets)


def generate(spec: GeneratorSpec):
    """Dispatch on ``spec.kind``."""
    return {
        "shared-subspace": gen_shared_subspace,
        "needle": gen_needle,
        "iid-gaussian": gen_iid_gaussian,
        "multi-turn-needle": gen_multi_turn_needle,
        "concentrated": gen_concentrated,
    }[spec.kind](spec)


def decode_tokens(spec: GeneratorSpec, n: int, retry: int = 0):
    """Post-RoPE keys and values for ``n`` generated tokens following the context.

    Keys are small (norm ~0.1) so that generated tokens do not swamp the
    context attention. Returns ``(keys, values)`` each ``(n, kv_heads, head_dim)``.
    """
    h, d = spec.num_kv_heads, spec.head_dim
    rng = CounterRNG(spec.seed, 1000 + retry)
    k_pre = rng.normal((n, h, d), scale=0.1 / math.sqrt(d))
    pos = spec.seq_len + np.arange(n)
    keys = np.stack([rope_apply(k_pre[:, g, :], pos, spec.rope) for g in range(h)], axis=1)
    vals = rng.normal((n, h, d)).astype(np.float32)
    return keys.astype(np.float32), vals


def step_queries(spec: GeneratorSpec, base_Q, n: int, jitter: float = 0.01):
    """``n`` decode-step queries: ``base_Q`` plus small deterministic jitter per step."""
    base_Q = np.asarray(base_Q, dtype=np.float32)
    rng = CounterRNG(spec.seed, 2000)
    scale = jitter * float(np.sqrt(np.mean(base_Q.astype(np.float64) ** 2)))
    return [(base_Q + rng.normal(base_Q.shape, scale=scale)).astype(np.float32) for _ in range(n)]
