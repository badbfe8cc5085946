import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_cfg
from oracles import min_cos_by_chunk
from tierkv import analytics
from tierkv.errors import ParameterError
from tierkv.kvstore import ChunkId
from tierkv.linalg import RopeParams, rope_apply
from tierkv.prefill import PrefillState, prefill, reconstruct_chunk_keys, select_outliers


def random_inputs(h, s, d, seed=0, rope=None):
    g = np.random.default_rng(seed)
    K_pre = g.standard_normal((h, s, d)).astype(np.float32)
    rope = rope or RopeParams(d)
    K_rope = np.stack([rope_apply(K_pre[i], np.arange(s), rope) for i in range(h)])
    V = g.standard_normal((h, s, d)).astype(np.float32)
    return K_pre, K_rope, V


def test_no_outliers_all_chunks_landmarked():
    cfg = small_cfg(outliers=0)
    st_ = prefill(*random_inputs(2, 64, 16), cfg)
    assert st_.landmarks.shape == (2, 8, 16)
    assert st_.outlier_keys.shape == (2, 0, 16)


def test_landmark_count_arithmetic():
    cfg = small_cfg(outliers=2)
    st_ = prefill(*random_inputs(2, 64, 16), cfg)
    assert st_.n_chunks == 8
    assert st_.num_landmarks == 6
    assert len(st_.value_store) == 2 * 6


def test_planted_outlier_chunk_is_selected():
    h, s, d, c = 1, 64, 16, 8
    g = np.random.default_rng(3)
    K_rope = np.zeros((h, s, d), dtype=np.float32)
    for j in range(s // c):
        K_rope[0, j * c : (j + 1) * c] = g.standard_normal(d) + 2.0
    chunk = K_rope[0, 24:32].copy()
    chunk[5] = -chunk[:5].mean(axis=0) * 3
    K_rope[0, 24:32] = chunk
    expected = np.argsort(min_cos_by_chunk(K_rope[0], c), kind="stable")[:1]
    assert expected.tolist() == [3]
    cfg = small_cfg(num_q_heads=1, num_kv_heads=1, head_dim=d, outliers=1, rank=8)
    st_ = prefill(K_rope, K_rope, np.ones_like(K_rope), cfg)
    assert st_.outlier_chunk_ids.tolist() == [[3]]
    assert 3 not in st_.landmark_chunk_ids[0]


def test_outlier_selection_matches_brute_force():
    K_pre, K_rope, V = random_inputs(2, 96, 16, seed=8)
    cfg = small_cfg(outliers=4)
    st_ = prefill(K_pre, K_rope, V, cfg)
    for h in range(2):
        mins = min_cos_by_chunk(K_rope[h], 8)
        brute = sorted(sorted(range(len(mins)), key=lambda j: (mins[j], j))[:4])
        assert st_.outlier_chunk_ids[h].tolist() == brute
        np.testing.assert_allclose(st_.min_similarity[h], mins, atol=1e-6)


def test_outlier_ties_prefer_lower_index():
    assert select_outliers(np.array([0.5, 0.1, 0.1, 0.1, 0.9]), 2).tolist() == [1, 2]


def test_constant_chunk_landmark_is_exact():
    h, s, d = 1, 16, 4
    K = np.tile(np.array([1.5, -2.0, 0.25, 3.0], dtype=np.float32), (h, s, 1))
    cfg = small_cfg(num_q_heads=1, num_kv_heads=1, head_dim=d, outliers=0, rank=2)
    st_ = prefill(K, K, K, cfg)
    np.testing.assert_array_equal(st_.landmarks[0, 0], K[0, 0])


def test_key_compression_ratio_at_rank_160():
    cfg = small_cfg(num_q_heads=8, num_kv_heads=8, head_dim=128, rank=160, outliers=1, budget=4)
    st_ = prefill(*random_inputs(8, 256, 128, seed=1), cfg)
    fp = analytics.footprint(st_)
    assert fp.lowrank_a_bytes / fp.full_key_bytes == pytest.approx(160 / 1024)
    assert fp.key_compression == pytest.approx(6.4)


def test_rank_too_large():
    with pytest.raises(ParameterError):
        prefill(*random_inputs(2, 16, 16), small_cfg(rank=17))


def test_too_many_outliers():
    with pytest.raises(ParameterError):
        prefill(*random_inputs(2, 64, 16), small_cfg(outliers=8))


def test_sequence_shorter_than_chunk():
    with pytest.raises(ParameterError):
        prefill(*random_inputs(2, 4, 16), small_cfg(rank=4))


def test_batched_input_gives_independent_states():
    a = random_inputs(2, 64, 16, seed=1)
    b = random_inputs(2, 64, 16, seed=2)
    batch = [np.stack([x, y]) for x, y in zip(a, b)]
    states = prefill(*batch, small_cfg())
    assert len(states) == 2
    assert not np.allclose(states[0].landmarks, states[1].landmarks)
    assert states[0].value_store is not states[1].value_store


# -- reconstruction ----------------------------------------------------------


def test_full_rank_reconstruction_is_exact():
    K_pre, K_rope, V = random_inputs(2, 64, 16, seed=4)
    st_ = prefill(K_pre, K_rope, V, small_cfg(rank=32))
    for h in range(2):
        ids = st_.landmark_chunk_ids[h]
        keys, pos = reconstruct_chunk_keys(st_, h, ids)
        np.testing.assert_allclose(keys, K_rope[h, pos], atol=1e-4)


def test_low_rank_input_reconstructs_exactly():
    g = np.random.default_rng(6)
    h, s, d, r = 2, 64, 16, 5
    flat = g.standard_normal((s, r)) @ g.standard_normal((r, h * d))
    K_pre = flat.reshape(s, h, d).transpose(1, 0, 2).astype(np.float32)
    K_rope = np.stack([rope_apply(K_pre[i], np.arange(s), RopeParams(d)) for i in range(h)])
    st_ = prefill(K_pre, K_rope, np.zeros_like(K_pre), small_cfg(rank=r))
    keys, pos = reconstruct_chunk_keys(st_, 1, st_.landmark_chunk_ids[1])
    np.testing.assert_allclose(keys, K_rope[1, pos], atol=1e-4)


def test_truncated_reconstruction_two_paths():
    K_pre, K_rope, V = random_inputs(2, 64, 16, seed=7)
    st_ = prefill(K_pre, K_rope, V, small_cfg(rank=8))
    flat = K_pre.transpose(1, 0, 2).reshape(64, 32).astype(np.float64)
    U, S, Vt = np.linalg.svd(flat, full_matrices=False)
    approx = (U[:, :8] * S[:8]) @ Vt[:8]
    for h in range(2):
        ids = st_.landmark_chunk_ids[h][:3]
        keys, pos = reconstruct_chunk_keys(st_, h, ids)
        oracle = rope_apply(approx[pos, h * 16 : (h + 1) * 16], pos, RopeParams(16))
        np.testing.assert_allclose(keys, oracle, atol=1e-4)
        # the rotary step is an isometry: per-token error equals the pre-RoPE residual
        err_post = np.linalg.norm(keys - K_rope[h, pos], axis=1)
        err_pre = np.linalg.norm(approx[pos, h * 16 : (h + 1) * 16] - K_pre[h, pos], axis=1)
        np.testing.assert_allclose(err_post, err_pre, rtol=1e-3, atol=1e-4)


def test_reconstructing_an_outlier_fails():
    st_ = prefill(*random_inputs(2, 64, 16), small_cfg(outliers=2))
    with pytest.raises(ParameterError):
        reconstruct_chunk_keys(st_, 0, [int(st_.outlier_chunk_ids[0][0])])


def test_reconstructing_tail_fails():
    st_ = prefill(*random_inputs(2, 68, 16), small_cfg(outliers=1))
    with pytest.raises(ParameterError):
        reconstruct_chunk_keys(st_, 0, [8])


# -- coverage ----------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(8, 90), st.data())
def test_every_token_covered_exactly_once(c, s, data):
    n_full = s // c
    o = data.draw(st.integers(0, max(0, n_full - 1)))
    if n_full < 1:
        return
    cfg = small_cfg(chunk_size=c, outliers=o, rank=8, budget=1)
    K_pre, K_rope, V = random_inputs(2, s, 16, seed=s)
    st_ = prefill(K_pre, K_rope, V, cfg)
    for h in range(2):
        covered = list(st_.outlier_positions[h]) + list(st_.tail_positions)
        for cid in st_.value_store.ids():
            if cid.kv_head == h:
                covered += range(cid.chunk * c, (cid.chunk + 1) * c)
        assert sorted(covered) == list(range(s))
        assert st_.num_landmarks + o + (1 if st_.has_tail else 0) == st_.n_chunks


def test_values_offloaded_match_input():
    K_pre, K_rope, V = random_inputs(2, 64, 16, seed=12)
    st_ = prefill(K_pre, K_rope, V, small_cfg(outliers=2))
    blocks, _ = st_.value_store.fetch(st_.value_store.ids())
    for cid, b in blocks.items():
        assert b.tobytes() == V[cid.kv_head, cid.chunk * 8 : (cid.chunk + 1) * 8].tobytes()
    np.testing.assert_array_equal(st_.outlier_values[0], V[0, st_.outlier_positions[0]])


def test_outlier_fraction_at_paper_scale_setting():
    # 48 outlier chunks of 8 tokens at a 128K context
    assert 48 / (131072 // 8) == pytest.approx(0.0029, abs=1e-4)


def test_state_is_immutable():
    st_ = prefill(*random_inputs(2, 64, 16), small_cfg())
    with pytest.raises(ValueError):
        st_.landmarks[0, 0, 0] = 1.0


def test_save_load_round_trip(tmp_path):
    K_pre, K_rope, V = random_inputs(2, 70, 16, seed=13)
    st_ = prefill(K_pre, K_rope, V, small_cfg(outliers=2), layer=3)
    st_.save(tmp_path)
    back = PrefillState.load(tmp_path)
    for name in ("landmarks", "landmark_chunk_ids", "outlier_chunk_ids", "outlier_keys", "outlier_values",
                 "outlier_positions", "tail_keys", "tail_values", "tail_positions"):
        np.testing.assert_array_equal(getattr(back, name), getattr(st_, name))
    np.testing.assert_array_equal(back.low_rank.A, st_.low_rank.A)
    assert back.layer == 3 and back.seq_len == 70 and back.cfg == st_.cfg
    cid = ChunkId(3, 1, int(st_.landmark_chunk_ids[1][0]))
    a, _ = back.value_store.fetch([cid])
    b, _ = st_.value_store.fetch([cid])
    assert a[cid].tobytes() == b[cid].tobytes()
