import numpy as np
import pytest

from tierkv import oracle
from tierkv.errors import ParameterError
from tierkv.linalg import subspace_similarity, truncated_svd
from tierkv.rng import CounterRNG
from tierkv.workload import GeneratorSpec, decode_tokens, gen_shared_subspace, generate, step_queries


def subspace_spec(seed, r, noise, D=64):
    return GeneratorSpec(kind="shared-subspace", seed=seed, seq_len=1024, extension_len=256, head_dim=D,
                         num_kv_heads=1, num_q_heads=1, intrinsic_rank=r, noise=noise)


def similarities(spec):
    ctx, ext, ind = gen_shared_subspace(spec)
    r = spec.intrinsic_rank
    B = [truncated_svd(x, r).B for x in (ctx, ext, ind)]
    return subspace_similarity(B[0], B[1]), subspace_similarity(B[0], B[2])


# -- rng ---------------------------------------------------------------------


def test_rng_streams_are_reproducible_and_distinct():
    a = CounterRNG(7, 1).uniform(100)
    assert np.array_equal(a, CounterRNG(7, 1).uniform(100))
    assert not np.array_equal(a, CounterRNG(7, 2).uniform(100))
    assert not np.array_equal(a, CounterRNG(8, 1).uniform(100))
    assert np.all((a >= 0) & (a < 1))


def test_rng_normal_moments():
    x = CounterRNG(3, 0).normal(200_000)
    assert abs(x.mean()) < 0.01 and abs(x.std() - 1) < 0.01


def test_rng_choice_distinct():
    c = CounterRNG(1, 0).choice(50, 50)
    assert sorted(c.tolist()) == list(range(50))


def test_rng_orthonormal_rows():
    B = CounterRNG(2, 0).orthonormal(32, 5)
    np.testing.assert_allclose(B @ B.T, np.eye(5), atol=1e-10)


# -- shared subspace ---------------------------------------------------------


def test_noiseless_context_and_extension_share_subspace():
    spec = subspace_spec(0, 4, 0.0)
    ctx, ext, ind = gen_shared_subspace(spec)
    assert ctx.shape == (1024, 64) and ext.shape == (256, 64) and ind.shape == (1024, 64)
    s = np.linalg.svd(ctx.astype(np.float64), compute_uv=False)
    assert s[4] / s[0] < 1e-5  # exact rank 4
    same, _ = similarities(spec)
    assert same == pytest.approx(1.0, abs=1e-3)


def test_independent_overlap_matches_random_subspace_expectation():
    # two uniformly random r-dim subspaces of R^D overlap r/D in expectation
    vals = [similarities(subspace_spec(seed, 4, 0.0))[1] for seed in range(100)]
    assert np.mean(vals) == pytest.approx(4 / 64, abs=0.015)


def test_noisy_margin_over_twenty_seeds():
    pairs = np.array([similarities(subspace_spec(seed, 16, 0.1)) for seed in range(20)])
    assert pairs[:, 0].mean() - pairs[:, 1].mean() >= 0.2


def test_rank_above_width_rejected():
    with pytest.raises(ParameterError):
        GeneratorSpec(kind="shared-subspace", head_dim=4, num_kv_heads=1, num_q_heads=1, intrinsic_rank=5)


def test_negative_noise_rejected():
    with pytest.raises(ParameterError):
        GeneratorSpec(noise=-0.1)


# -- needle ------------------------------------------------------------------


def needle_spec(**kw):
    base = dict(kind="needle", seq_len=1024, head_dim=32, num_kv_heads=2, num_q_heads=4, seed=1)
    base.update(kw)
    return GeneratorSpec(**base)


@pytest.mark.parametrize("pos", [0, 1023])
def test_needle_at_the_edges_passes_self_check(pos):
    case = generate(needle_spec(needle_position=pos))
    masses = oracle.exact_chunk_masses(case.Q, case.K_rope, 8, per_query_head=True)
    assert masses[:, pos // 8].min() > 0.5
    assert case.needle_positions == [pos]


def test_stronger_needle_takes_more_mass():
    weak = generate(needle_spec(needle_strength=12.0))
    strong = generate(needle_spec(needle_strength=40.0))
    m = lambda c: oracle.exact_chunk_masses(c.Q, c.K_rope, 8)[:, 512 // 8].min()
    assert m(strong) > m(weak)
    assert m(strong) > 0.999


def test_needle_position_out_of_range():
    with pytest.raises(ParameterError):
        needle_spec(needle_position=1024)


def test_multi_turn_shapes():
    case = generate(needle_spec(kind="multi-turn-needle", turns=3))
    assert case.Q.shape == (3, 1, 4, 32)
    assert len(set(p // 8 for p in case.needle_positions)) == 3


def test_concentrated_hot_chunks_dominate():
    spec = GeneratorSpec(kind="concentrated", seq_len=2048, head_dim=32, num_kv_heads=2, num_q_heads=4,
                         hot_chunks=8, seed=4)
    case = generate(spec)
    masses = oracle.exact_chunk_masses(case.Q, case.K_rope, 8)
    for g in range(2):
        assert masses[g, case.hot_chunks[g]].sum() > 0.5


@pytest.mark.parametrize("kind", ["needle", "iid-gaussian", "multi-turn-needle", "concentrated"])
def test_generators_are_deterministic(kind):
    spec = needle_spec(kind=kind, turns=2, hot_chunks=4)
    a, b = generate(spec), generate(spec)
    for name in ("K_pre", "K_rope", "V", "Q"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = generate(needle_spec(kind=kind, turns=2, hot_chunks=4, seed=2))
    assert a.K_pre.tobytes() != c.K_pre.tobytes()


def test_shared_subspace_deterministic():
    a = gen_shared_subspace(subspace_spec(3, 8, 0.1))
    b = gen_shared_subspace(subspace_spec(3, 8, 0.1))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_decode_tokens_and_step_queries():
    spec = needle_spec()
    k, v = decode_tokens(spec, 5)
    assert k.shape == v.shape == (5, 2, 32)
    qs = step_queries(spec, np.ones((1, 4, 32)), 3)
    assert len(qs) == 3 and not np.array_equal(qs[0], qs[1])
    np.testing.assert_allclose(qs[0], 1.0, atol=0.1)
