"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The numba versions are used when numba imports cleanly and the environment
variable ``TIERKV_DISABLE_NUMBA`` is unset (or "0"). Both flavours take
float32 inputs and accumulate in float64.

Kernels
-------
chunk_cosine      per-chunk means and token-to-mean cosine similarities
rope              pairwise rotation by position * inverse frequency
gather_matmul     A[rows] @ B
attend            causal softmax attention for one kv head
landmark_scores   softmax-over-landmarks, summed over queries, max over group
"""

import contextlib
import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("TIERKV_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# numpy flavour
# ---------------------------------------------------------------------------

def _chunk_cosine_np(K, c):
    n = K.shape[0] // c
    d = K.shape[1]
    blocks = K[: n * c].astype(np.float64).reshape(n, c, d)
    means = blocks.mean(axis=1)
    dots = np.einsum("ncd,nd->nc", blocks, means)
    norms = np.linalg.norm(blocks, axis=2) * np.linalg.norm(means, axis=1)[:, None]
    sims = np.full((n, c), -1.0)
    ok = norms > 0.0
    sims[ok] = dots[ok] / norms[ok]
    np.clip(sims, -1.0, 1.0, out=sims)
    return means, sims


def _rope_np(X, positions, inv_freq, interleaved):
    X64 = X.astype(np.float64)
    ang = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(ang)
    sin = np.sin(ang)
    out = np.empty_like(X64)
    half = X.shape[1] // 2
    if interleaved:
        x, y = X64[:, 0::2], X64[:, 1::2]
        out[:, 0::2] = x * cos - y * sin
        out[:, 1::2] = x * sin + y * cos
    else:
        x, y = X64[:, :half], X64[:, half:]
        out[:, :half] = x * cos - y * sin
        out[:, half:] = x * sin + y * cos
    return out.astype(np.float32)


def _gather_matmul_np(A, B, rows):
    return (A[rows].astype(np.float64) @ B.astype(np.float64)).astype(np.float32)


def _attend_np(Q, q_pos, K, V, k_pos, scale):
    logits = (Q.astype(np.float64) @ K.astype(np.float64).T) * scale
    allowed = k_pos[None, :] <= q_pos[:, None]
    logits = np.where(allowed, logits, -np.inf)
    row_max = logits.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    w = np.exp(logits - row_max)
    total = w.sum(axis=1, keepdims=True)
    w = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
    out = (w @ V.astype(np.float64)).astype(np.float32)
    return out, w


def _landmark_scores_np(Qg, L, scale):
    # Qg: (g, s_q, d)
    P = np.einsum("gsd,md->gsm", Qg.astype(np.float64), L.astype(np.float64)) * scale
    P -= P.max(axis=2, keepdims=True)
    S = np.exp(P)
    S /= S.sum(axis=2, keepdims=True)
    return S.sum(axis=1).max(axis=0)


# ---------------------------------------------------------------------------
# numba flavour
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    _jit = numba.njit(cache=True, fastmath=False)

    @_jit
    def _chunk_cosine_nb(K, c):
        n = K.shape[0] // c
        d = K.shape[1]
        means = np.zeros((n, d))
        sims = np.empty((n, c))
        for j in range(n):
            base = j * c
            for t in range(c):
                for e in range(d):
                    means[j, e] += K[base + t, e]
            mnorm = 0.0
            for e in range(d):
                means[j, e] /= c
                mnorm += means[j, e] * means[j, e]
            mnorm = np.sqrt(mnorm)
            for t in range(c):
                dot = 0.0
                rnorm = 0.0
                for e in range(d):
                    x = np.float64(K[base + t, e])
                    dot += x * means[j, e]
                    rnorm += x * x
                denom = np.sqrt(rnorm) * mnorm
                if denom > 0.0:
                    v = dot / denom
                    if v > 1.0:
                        v = 1.0
                    elif v < -1.0:
                        v = -1.0
                    sims[j, t] = v
                else:
                    sims[j, t] = -1.0
        return means, sims

    @_jit
    def _rope_nb(X, positions, inv_freq, interleaved):
        s, d = X.shape
        half = d // 2
        out = np.empty((s, d), dtype=np.float32)
        for t in range(s):
            p = np.float64(positions[t])
            for i in range(half):
                a = p * inv_freq[i]
                cs = np.cos(a)
                sn = np.sin(a)
                if interleaved:
                    ix = 2 * i
                    iy = 2 * i + 1
                else:
                    ix = i
                    iy = i + half
                x = np.float64(X[t, ix])
                y = np.float64(X[t, iy])
                out[t, ix] = x * cs - y * sn
                out[t, iy] = x * sn + y * cs
        return out

    @_jit
    def _gather_matmul_nb(A, B, rows):
        m = rows.shape[0]
        r, n = B.shape
        out = np.empty((m, n), dtype=np.float32)
        acc = np.empty(n)
        for i in range(m):
            acc[:] = 0.0
            src = rows[i]
            for k in range(r):
                a = np.float64(A[src, k])
                for j in range(n):
                    acc[j] += a * B[k, j]
            for j in range(n):
                out[i, j] = acc[j]
        return out

    @_jit
    def _attend_nb(Q, q_pos, K, V, k_pos, scale):
        m, d = Q.shape
        n = K.shape[0]
        out = np.zeros((m, d), dtype=np.float32)
        w = np.zeros((m, n))
        acc = np.empty(d)
        for i in range(m):
            mx = -np.inf
            for j in range(n):
                if k_pos[j] <= q_pos[i]:
                    dot = 0.0
                    for e in range(d):
                        dot += np.float64(Q[i, e]) * K[j, e]
                    dot *= scale
                    w[i, j] = dot
                    if dot > mx:
                        mx = dot
            if mx == -np.inf:
                continue
            total = 0.0
            for j in range(n):
                if k_pos[j] <= q_pos[i]:
                    w[i, j] = np.exp(w[i, j] - mx)
                    total += w[i, j]
            acc[:] = 0.0
            for j in range(n):
                if k_pos[j] <= q_pos[i]:
                    w[i, j] /= total
                    for e in range(d):
                        acc[e] += w[i, j] * V[j, e]
            for e in range(d):
                out[i, e] = acc[e]
        return out, w

    @_jit
    def _landmark_scores_nb(Qg, L, scale):
        g, sq, d = Qg.shape
        m = L.shape[0]
        best = np.full(m, -np.inf)
        row = np.empty(m)
        summed = np.empty(m)
        for h in range(g):
            summed[:] = 0.0
            for i in range(sq):
                mx = -np.inf
                for j in range(m):
                    dot = 0.0
                    for e in range(d):
                        dot += np.float64(Qg[h, i, e]) * L[j, e]
                    row[j] = dot * scale
                    if row[j] > mx:
                        mx = row[j]
                total = 0.0
                for j in range(m):
                    row[j] = np.exp(row[j] - mx)
                    total += row[j]
                for j in range(m):
                    summed[j] += row[j] / total
            for j in range(m):
                if summed[j] > best[j]:
                    best[j] = summed[j]
        return best


_NUMPY = {
    "chunk_cosine": _chunk_cosine_np,
    "rope": _rope_np,
    "gather_matmul": _gather_matmul_np,
    "attend": _attend_np,
    "landmark_scores": _landmark_scores_np,
}

if HAS_NUMBA:
    _NUMBA = {
        "chunk_cosine": _chunk_cosine_nb,
        "rope": _rope_nb,
        "gather_matmul": _gather_matmul_nb,
        "attend": _attend_nb,
        "landmark_scores": _landmark_scores_nb,
    }
else:  # pragma: no cover
    _NUMBA = None

BACKENDS = {"numpy": _NUMPY}
if _NUMBA is not None:
    BACKENDS["numba"] = _NUMBA

_active = "numba" if (HAS_NUMBA and not _env_disabled()) else "numpy"


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    _active = name


@contextlib.contextmanager
def use_backend(name: str):
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _c32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def chunk_cosine(K, c):
    """Return (means, sims) for the first ``len(K) // c`` full chunks of ``K``."""
    return BACKENDS[_active]["chunk_cosine"](_c32(K), int(c))


def rope(X, positions, inv_freq, interleaved=False):
    return BACKENDS[_active]["rope"](
        _c32(X), _i64(positions), np.ascontiguousarray(inv_freq, dtype=np.float64), bool(interleaved)
    )


def gather_matmul(A, B, rows):
    return BACKENDS[_active]["gather_matmul"](_c32(A), _c32(B), _i64(rows))


def attend(Q, q_pos, K, V, k_pos, scale):
    return BACKENDS[_active]["attend"](_c32(Q), _i64(q_pos), _c32(K), _c32(V), _i64(k_pos), float(scale))


def landmark_scores(Qg, L, scale):
    return BACKENDS[_active]["landmark_scores"](_c32(Qg), _c32(L), float(scale))
