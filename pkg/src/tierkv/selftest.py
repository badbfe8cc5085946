"""Fast golden checks behind ``tierkv selftest``."""

import io

import numpy as np

from . import analytics, oracle
from .analytics import TB, BandwidthParams
from .config import ShadowConfig
from .decode import decode_step
from .prefill import prefill
from .tensorfile import read_tensor, write_tensor
from .workload import GeneratorSpec, generate


def _bandwidth():
    b = analytics.equivalent_bandwidth(BandwidthParams(hit_rate=0.6)) / TB
    return 7.1 <= b <= 7.3, f"B_eq = {b:.4f} TB/s (want 7.2 +- 0.1)"


def _compression():
    ratio = analytics.key_compression(160, 1024)
    return abs(ratio - 6.4) < 1e-12, f"1024/160 = {ratio}"


def _oracle_equivalence():
    spec = GeneratorSpec(kind="iid-gaussian", seed=11, seq_len=512, head_dim=32, num_kv_heads=2, num_q_heads=4)
    case = generate(spec)
    n_c = spec.seq_len // 8
    cfg = ShadowConfig(rank=64, chunk_size=8, outliers=3, budget=n_c - 3, local_window=0,
                       num_q_heads=4, num_kv_heads=2, head_dim=32)
    state = prefill(case.K_pre, case.K_rope, case.V, cfg)
    out = decode_step(case.Q, state)
    err = float(np.max(np.abs(out.attn_out - oracle.full_attention(case.Q, case.K_rope, case.V))))
    return err <= 1e-4, f"max abs error {err:.2e} (want <= 1e-4)"


def _tensor_round_trip():
    x = np.arange(2 * 3 * 4 * 2, dtype=np.float32).reshape(2, 3, 4, 2) / 7
    buf = io.BytesIO()
    write_tensor(buf, x)
    y = read_tensor(buf.getvalue())
    return y.tobytes() == x.tobytes(), f"{buf.tell()} bytes"


CHECKS = [
    ("equivalent-bandwidth", _bandwidth),
    ("key-compression", _compression),
    ("oracle-equivalence", _oracle_equivalence),
    ("tensor-round-trip", _tensor_round_trip),
]


def run_checks():
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failed check
            ok, detail = False, f"{type(e).__name__}: {e}"
        yield name, bool(ok), detail
