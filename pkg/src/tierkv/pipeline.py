"""End-to-end driver: generate a workload, prefill it, run decode steps and
collect metrics. Shared by the CLI verbs and the test-suite."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import analytics, oracle
from .analytics import BandwidthParams
from .config import ShadowConfig
from .decode import LocalWindow, append_generated, decode_step
from .errors import ParameterError, StateError
from .prefill import prefill
from .workload import GeneratorSpec, decode_tokens, generate, step_queries


@dataclass
class RunConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    shadow: ShadowConfig = field(
        default_factory=lambda: ShadowConfig(
            rank=64, chunk_size=8, outliers=4, budget=16, local_window=16, num_q_heads=8, num_kv_heads=2, head_dim=64
        )
    )
    bandwidth: BandwidthParams = field(default_factory=BandwidthParams)
    steps: int = 4
    oracle: bool = False
    out: str = "."
    format: str = "json"

    def __post_init__(self):
        g, s = self.generator, self.shadow
        if (g.num_q_heads, g.num_kv_heads, g.head_dim) != (s.num_q_heads, s.num_kv_heads, s.head_dim):
            raise ParameterError("generator and shadow config disagree on head counts or head_dim")
        if g.chunk_size != s.chunk_size and g.kind in ("concentrated", "multi-turn-needle", "needle"):
            # generators only use chunk_size for self-checks and hot-chunk layout
            self.generator = replace(g, chunk_size=s.chunk_size)
        if (g.rope_base, g.rope_interleaved) != (s.rope_base, s.rope_interleaved):
            raise ParameterError("generator and shadow config disagree on rotary parameters")
        if g.kind == "shared-subspace":
            raise ParameterError("shared-subspace produces key matrices only; it cannot drive a decode run")
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.format not in ("json", "csv"):
            raise ParameterError(f"format must be json or csv, got {self.format!r}")


def _check_invariants(state, out):
    st = state.value_store.stats_snapshot()
    if st.chunks_hit > st.chunks_requested or st.chunks_hit < 0:
        raise StateError(f"cache counters inconsistent: {st}")
    if st.bytes_fetched_total != (st.chunks_requested - st.chunks_hit) * state.value_store.chunk_bytes:
        raise StateError(f"fetched bytes disagree with miss count: {st}")
    for row in out.selected_chunks:
        if len(set(row.tolist())) != len(row):
            raise StateError("duplicate chunk in a selection")


def execute(rc: RunConfig, keep_outputs: bool = False) -> dict:
    """Run ``rc.steps`` decode steps and return a JSON-ready result dict.

    With ``rc.oracle`` each step is compared against exact attention over the
    context plus the generated tokens still in the window.
    """
    spec, cfg = rc.generator, rc.shadow
    case = generate(spec)
    state = prefill(case.K_pre, case.K_rope, case.V, cfg)
    window = LocalWindow.for_state(state)
    gen_k, gen_v = decode_tokens(spec, rc.steps)
    turns = case.Q if case.Q.ndim == 4 else case.Q[None]
    per_turn = [step_queries(spec, turns[t], rc.steps) for t in range(len(turns))]
    G = cfg.group_size

    trace, outputs = [], []
    errs, needle_errs, recalls = [], [], []
    for step in range(rc.steps):
        turn = step % len(turns)
        Q = per_turn[turn][step]
        append_generated(window, gen_k[step], gen_v[step])
        out = decode_step(Q, state, window, return_weights=rc.oracle)
        _check_invariants(state, out)
        extra = {"turn": turn}
        if rc.oracle:
            wpos = window.positions
            K = np.concatenate([case.K_rope, np.stack([window.keys(g) for g in range(cfg.num_kv_heads)])], axis=1)
            V = np.concatenate([case.V, np.stack([window.values(g) for g in range(cfg.num_kv_heads)])], axis=1)
            kpos = np.concatenate([np.arange(state.seq_len), wpos])
            qpos = np.full(Q.shape[0], window.next_position - 1)
            full = oracle.full_attention(Q, K, V, kpos, qpos)
            err = float(np.max(np.abs(out.attn_out.astype(np.float64) - full)))
            errs.append(err)
            extra["max_abs_error"] = err
            n_full = state.n_full_chunks
            ctx = n_full * cfg.chunk_size
            masses = oracle.exact_chunk_masses(Q, case.K_rope[:, :ctx], cfg.chunk_size)
            ranking = oracle.chunk_ranking(masses)
            rec = analytics.mean_recall(out.selected_chunks, ranking, state.landmark_chunk_ids)
            recalls.append(rec)
            extra["recall"] = rec
            if case.needle_positions:
                p = case.needle_positions[turn]
                W = oracle.attention_weights(Q, K, kpos, qpos)
                idx = int(np.nonzero(kpos == p)[0][0])
                diffs = [abs(out.weight_of(p, h, row=0, group_size=G) - W[0, h, idx]) for h in range(cfg.num_q_heads)]
                needle_errs.append(max(diffs))
                extra["needle_weight_error"] = max(diffs)
                extra["needle_chunk_attended"] = bool(
                    all(
                        (p // cfg.chunk_size) in set(out.selected_chunks[g].tolist())
                        or (p // cfg.chunk_size) in set(state.outlier_chunk_ids[g].tolist())
                        or p >= ctx
                        for g in range(cfg.num_kv_heads)
                    )
                )
        trace.append(out.trace_record(step, **extra))
        if keep_outputs:
            outputs.append(out)

    stats = state.value_store.stats_snapshot()
    fp = analytics.footprint(state, window)
    bw = replace(rc.bandwidth, hit_rate=stats.hit_rate)
    metrics = {"hit_rate": stats.hit_rate}
    if rc.oracle:
        metrics["max_abs_error"] = max(errs)
        metrics["recall_mean"] = float(np.mean(recalls))
        if needle_errs:
            metrics["needle"] = {"positions": case.needle_positions, "max_abs_error": max(needle_errs)}
    result = {
        "generator": spec.as_dict(),
        "shadow": cfg.as_dict(),
        "steps": rc.steps,
        "oracle": rc.oracle,
        "metrics": metrics,
        "footprint": fp.as_dict(),
        "tier_stats": stats.as_dict(),
        "bandwidth": {
            "params": bw.as_dict(),
            "equivalent_bandwidth": analytics.equivalent_bandwidth(bw),
        },
        "trace": trace,
    }
    if keep_outputs:
        result["_outputs"] = outputs
        result["_state"] = state
    return result


SWEEP_AXES = {"rank": "rank", "chunk": "chunk_size", "budget": "budget"}

SWEEP_COLUMNS = [
    "axis",
    "value",
    "recall",
    "max_abs_error",
    "needle_weight_error",
    "hit_rate",
    "key_compression",
    "fast_tier_compression",
    "fast_tier_bytes",
    "slow_tier_bytes",
    "lowrank_a_bytes",
    "factor_b_bytes",
    "landmark_bytes",
    "outlier_kv_bytes",
    "cache_resident_bytes",
]


def sweep_point(rc: RunConfig, axis: str, value: int) -> dict:
    if axis not in SWEEP_AXES:
        raise ParameterError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    shadow = replace(rc.shadow, **{SWEEP_AXES[axis]: int(value)})
    point = replace(rc, shadow=shadow, oracle=True)
    res = execute(point)
    fp = res["footprint"]
    m = res["metrics"]
    row = {
        "axis": axis,
        "value": int(value),
        "recall": m["recall_mean"],
        "max_abs_error": m["max_abs_error"],
        "needle_weight_error": m.get("needle", {}).get("max_abs_error", ""),
        "hit_rate": m["hit_rate"],
    }
    for col in SWEEP_COLUMNS[6:]:
        row[col] = fp[col]
    return row
