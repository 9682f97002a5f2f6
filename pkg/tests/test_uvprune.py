import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specpipe.uvprune import (DEFAULT_BAND, LayerStack, PruneConfig, ZeroNorm, attention_prune, boundary_concentration,
                              cosine_similarity, frame_layout, keep_count, make_synthetic_stack, random_prune, recall,
                              score_tokens, similarity, top_k, uniform_frame_prune, uv_prune)


def random_stack(seed, L=5, m=12, n=3, d=6, frames=4):
    gen = np.random.default_rng(seed)
    return LayerStack(gen.standard_normal((L + 1, m, d)), gen.standard_normal((L + 1, n, d)),
                      frame_layout(m, frames))


def last_minus_first(stack, L):
    """Score oracle: sum over text tokens of final-layer minus layer-0 cosine, one pair at a time."""
    out = np.zeros(stack.m)
    for i in range(stack.m):
        for j in range(stack.n):
            out[i] += (cosine_similarity(stack.video[L, i], stack.text[L, j])
                       - cosine_similarity(stack.video[0, i], stack.text[0, j]))
    return out


class TestCosine:
    def test_examples(self):
        assert cosine_similarity([1, 0], [1, 0]) == 1.0
        assert cosine_similarity([1, 0], [0, 1]) == 0.0
        assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(0.70711, abs=1e-5)

    def test_zero_norm(self):
        with pytest.raises(ZeroNorm):
            cosine_similarity([0, 0], [1, 0])
        s = random_stack(0)
        s.video[2, 3] = 0.0
        with pytest.raises(ZeroNorm):
            score_tokens(s, PruneConfig(0.5, L=5))


class TestScores:
    def test_constant_layers_score_zero(self):
        gen = np.random.default_rng(1)
        v = np.broadcast_to(gen.standard_normal((1, 8, 4)), (4, 8, 4))
        t = np.broadcast_to(gen.standard_normal((1, 2, 4)), (4, 2, 4))
        sc = score_tokens(LayerStack(v, t, np.zeros(8)), PruneConfig(0.5, L=3))
        np.testing.assert_allclose(sc.delta_s, 0.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_telescoping_against_pairwise_oracle(self, seed):
        s = random_stack(seed)
        sc = score_tokens(s, PruneConfig(0.5, L=5))
        np.testing.assert_allclose(sc.delta_s, last_minus_first(s, 5), atol=1e-9)
        np.testing.assert_allclose(sc.per_layer.sum(axis=0), sc.delta_s, atol=1e-12)

    def test_uses_only_the_first_L_layers(self):
        s = random_stack(3, L=6)
        a = score_tokens(s, PruneConfig(0.5, L=4)).delta_s
        np.testing.assert_allclose(a, last_minus_first(s, 4), atol=1e-9)
        with pytest.raises(ValueError):
            score_tokens(s, PruneConfig(0.5, L=7))

    def test_planted_score_is_n_L_delta(self):
        m, n, L, delta = 64, 5, 10, 0.03
        planted = [3, 17, 40]
        stack, _ = make_synthetic_stack(m, n, 8, L, planted, delta, 0.0, np.random.default_rng(2), frames=16)
        sc = score_tokens(stack, PruneConfig(0.5, L=L)).delta_s
        np.testing.assert_allclose(sc[planted], n * L * delta, atol=1e-9)
        rest = np.delete(sc, planted)
        np.testing.assert_allclose(rest, 0.0, atol=1e-9)  # bridge walks end where they start

    def test_similarity_shape(self):
        s = random_stack(0)
        assert similarity(s).shape == (6, 12, 3)


class TestSelection:
    def test_ties_go_to_lower_index(self):
        assert top_k(np.ones(4), keep_count(0.5, 4)) == (0, 1)
        assert attention_prune(np.zeros(10), PruneConfig(0.7)).retained == (0, 1, 2)

    @pytest.mark.parametrize("alpha, m, k", [(0.9, 25088, 2509), (0.5, 5, 3), (0.9, 1000, 100), (1.0, 10, 1),
                                             (0.0, 7, 7), (0.75, 2, 1)])
    def test_keep_count(self, alpha, m, k):
        assert keep_count(alpha, m) == k

    def test_same_scores_same_selection(self):
        s = random_stack(4)
        cfg = PruneConfig(0.5, L=5)
        assert attention_prune(score_tokens(s, cfg).delta_s, cfg).retained == uv_prune(s, cfg).retained

    def test_result_sizes(self):
        cfg = PruneConfig(0.75)
        assert len(random_prune(40, cfg, np.random.default_rng(0)).retained) == 10
        uf = uniform_frame_prune(frame_layout(40, 10), cfg)
        assert len(uf.retained) == 10
        assert sorted(frame_layout(40, 10)[list(uf.retained)].tolist()) == list(range(10))

    def test_config_validation(self):
        for kw in [dict(alpha=-0.1), dict(alpha=0.5, L=0), dict(alpha=0.5, tie_break="random")]:
            with pytest.raises(ValueError):
                PruneConfig(**kw)


class TestInvariances:
    @given(st.integers(0, 10_000), st.floats(0.1, 0.9))
    @settings(max_examples=30, deadline=None)
    def test_permutation_equivariance(self, seed, alpha):
        s = random_stack(seed)
        cfg = PruneConfig(alpha, L=5)
        perm = np.random.default_rng(seed + 1).permutation(s.m)
        base = score_tokens(s, cfg).delta_s
        permuted = score_tokens(s.take(perm), cfg).delta_s
        np.testing.assert_allclose(permuted, base[perm], atol=1e-12)
        # away from ties the retained set maps through the permutation
        if len(np.unique(np.round(base, 9))) == s.m:
            mapped = sorted(int(perm[i]) for i in uv_prune(s.take(perm), cfg).retained)
            assert tuple(mapped) == uv_prune(s, cfg).retained

    def test_position_labels_do_not_matter(self):
        s = random_stack(5)
        cfg = PruneConfig(0.6, L=5)
        relabelled = LayerStack(s.video, s.text, s.frame_map[::-1].copy())
        assert uv_prune(relabelled, cfg).retained == uv_prune(s, cfg).retained

    @given(st.integers(0, 10_000), st.integers(0, 11), st.floats(1e-3, 1e3))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, seed, token, scale):
        s = random_stack(seed)
        cfg = PruneConfig(0.5, L=5)
        v = s.video.copy()
        v[:, token] *= scale
        scaled = LayerStack(v, s.text, s.frame_map)
        np.testing.assert_allclose(score_tokens(scaled, cfg).delta_s, score_tokens(s, cfg).delta_s, atol=1e-9)


class TestMetrics:
    def test_boundary_concentration_extremes(self):
        fm = frame_layout(256, 128)
        inside = [i for i in range(256) if fm[i] in DEFAULT_BAND]
        from specpipe.uvprune import PruneResult, PruneScores
        res = PruneResult(tuple(inside), PruneScores(np.zeros(256)), "manual")
        assert boundary_concentration(res, fm, DEFAULT_BAND) == 1.0
        with pytest.raises(ValueError):
            boundary_concentration(res, fm, [500])

    def test_uniform_random_retention_expectation(self):
        fm = frame_layout(1024, 128)
        gen = np.random.default_rng(0)
        cfg = PruneConfig(0.9)
        vals = [boundary_concentration(random_prune(1024, cfg, gen), fm, DEFAULT_BAND) for _ in range(10_000)]
        assert abs(np.mean(vals) - 5 / 128) <= 0.01

    def test_recall(self):
        from specpipe.uvprune import PruneResult, PruneScores
        res = PruneResult((1, 2, 3), PruneScores(np.zeros(5)), "manual")
        assert recall(res, [1, 4]) == 0.5
        assert recall(res, []) == 1.0


class TestSyntheticStack:
    def test_planted_recall_is_perfect_when_keep_matches(self):
        gen = np.random.default_rng(7)
        m, alpha = 200, 0.9
        k = keep_count(alpha, m)
        planted = gen.choice(m, size=k, replace=False)
        stack, _ = make_synthetic_stack(m, 4, 12, 8, planted, 0.02, 3.0, gen, frames=50)
        assert recall(uv_prune(stack, PruneConfig(alpha, L=8)), planted) == 1.0

    def test_no_sink_means_methods_agree(self):
        m, alpha = 512, 0.8
        gaps = []
        for seed in range(10):
            gen = np.random.default_rng(seed)
            planted = gen.choice(m, size=keep_count(alpha, m), replace=False)
            stack, attn = make_synthetic_stack(m, 4, 12, 10, planted, 0.01, 0.0, gen)
            cfg = PruneConfig(alpha, L=10)
            gaps.append(abs(recall(uv_prune(stack, cfg), planted) - recall(attention_prune(attn, cfg), planted)))
        assert max(gaps) <= 0.1

    def test_zero_delta_gives_no_signal(self):
        gen = np.random.default_rng(3)
        planted = np.arange(0, 300, 3)
        stack, _ = make_synthetic_stack(300, 4, 12, 10, planted, 0.0, 0.0, gen, frames=30)
        sc = score_tokens(stack, PruneConfig(0.5, L=10)).delta_s
        np.testing.assert_allclose(sc, 0.0, atol=1e-9)

    def test_sink_bias_pulls_attention_to_band(self):
        m, alpha = 1024, 0.9
        gen = np.random.default_rng(11)
        planted = gen.choice(m, size=keep_count(alpha, m), replace=False)
        stack, attn = make_synthetic_stack(m, 8, 16, 20, planted, 0.01, 2.0, gen)
        cfg = PruneConfig(alpha, L=20)
        assert boundary_concentration(attention_prune(attn, cfg), stack.frame_map, DEFAULT_BAND) >= 0.15
        assert boundary_concentration(uv_prune(stack, cfg), stack.frame_map, DEFAULT_BAND) <= 0.08

    def test_argument_checks(self):
        gen = np.random.default_rng(0)
        with pytest.raises(ValueError):
            make_synthetic_stack(10, 2, 2, 3, [], 0.1, 0.0, gen)
        with pytest.raises(ValueError):
            make_synthetic_stack(10, 2, 4, 3, [10], 0.1, 0.0, gen)
        with pytest.raises(ValueError):
            make_synthetic_stack(10, 2, 4, 20, [1], 0.1, 0.0, gen)


class TestFileFormat:
    def test_roundtrip(self, tmp_path):
        s = random_stack(9)
        path = tmp_path / "stack.bin"
        s.save(path)
        back = LayerStack.load(path)
        np.testing.assert_array_equal(back.video, s.video.astype(np.float32))
        np.testing.assert_array_equal(back.text, s.text.astype(np.float32))
        np.testing.assert_array_equal(back.frame_map, s.frame_map)

    def test_truncated_file(self, tmp_path):
        s = random_stack(9)
        path = tmp_path / "stack.bin"
        s.save(path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError):
            LayerStack.load(path)

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            LayerStack(np.ones((3, 4, 2)), np.ones((3, 1, 3)), np.zeros(4))
        with pytest.raises(ValueError):
            LayerStack(np.ones((3, 4, 2)), np.ones((3, 1, 2)), np.zeros(5))
        with pytest.raises(ValueError):
            LayerStack(np.ones((1, 4, 2)), np.ones((1, 1, 2)), np.zeros(4))
