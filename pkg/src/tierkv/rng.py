"""Counter-based random streams with a fully specified output mapping.

Bits come from Philox4x64-10 (Salmon et al., "Parallel random numbers: as
easy as 1, 2, 3") as implemented by ``numpy.random.Philox`` with
``key = (seed, stream)`` and the counter starting at zero. The raw 64-bit
words are consumed in counter order and mapped as follows, so any language
with a Philox4x64-10 implementation reproduces the same floats:

* uniform in [0, 1):  ``(u >> 11) * 2**-53``
* standard normal:    Box-Muller over consecutive uniforms ``u1, u2``:
  ``r = sqrt(-2 ln(1 - u1))``; emits ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``
* integer in [0, n):  ``floor(uniform * n)``

numpy's own distribution samplers are deliberately not used; their
algorithms are numpy-specific.
"""

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_NEG53 = 2.0**-53


class CounterRNG:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bits = np.random.Philox(key=key, counter=0)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n)).astype(np.uint64)

    def uniform(self, size) -> np.ndarray:
        n = int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53
        return u.reshape(size)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((m, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return (scale * z.reshape(-1)[:n]).reshape(size)

    def integers(self, n: int, size) -> np.ndarray:
        return np.floor(self.uniform(size) * n).astype(np.int64)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct values from ``range(n)`` via a partial Fisher-Yates shuffle."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n}")
        pool = np.arange(n, dtype=np.int64)
        u = self.uniform(k)
        for i in range(k):
            j = i + int(u[i] * (n - i))
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    def orthonormal(self, dim: int, rank: int) -> np.ndarray:
        """``rank`` orthonormal rows spanning a uniformly random subspace of R^dim."""
        G = self.normal((dim, rank))
        Qm, R = np.linalg.qr(G)
        Qm = Qm * np.sign(np.diag(R))[None, :]
        return Qm.T
