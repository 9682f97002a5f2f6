import itertools

import numpy as np
import pytest
from scipy import stats

from specpipe import Distribution, SeededRng, TimingLedger, TimingModel, Vocab, autoregressive_generate
from specpipe.models import MultimodalPrefix, NgramModel
from specpipe.specdec import (DraftZeroMass, WindowConfig, accept_probability, draft_window, kernel_marginal,
                              measure_acceptance_ratio, residual, vanilla_sd_generate, verify_window)
from specpipe.theory import trunc_geo_pmf

from conftest import random_dist, synthetic
from oracles import kernel_output_law

PREFIX = MultimodalPrefix(tuple(range(300, 316)), (1, 2))


class FixedUniforms:
    """Stand-in random stream that returns preset uniforms."""

    def __init__(self, *values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


def const_model(p):
    return NgramModel(np.asarray([p], float), 0)


def simplex_grid(V, steps):
    for combo in itertools.product(range(steps + 1), repeat=V):
        if sum(combo) == steps:
            yield np.array(combo, float) / steps


class TestAcceptProbability:
    def test_examples(self):
        p = Distribution([0.5, 0.5])
        assert accept_probability(p, p, 1) == 1.0
        assert accept_probability(Distribution([0.5, 0.5]), Distribution([1.0, 0.0]), 0) == 0.5
        assert accept_probability(Distribution([0.9, 0.1]), Distribution([0.3, 0.7]), 0) == 1.0

    def test_zero_draft_mass_is_an_error(self):
        with pytest.raises(DraftZeroMass):
            accept_probability(Distribution([0.5, 0.5]), Distribution([1.0, 0.0]), 1)


class TestResidual:
    def test_examples(self):
        np.testing.assert_allclose(residual(Distribution([0.5, 0.5]), Distribution([1, 0])).probs, [0, 1])
        np.testing.assert_allclose(
            residual(Distribution([0.6, 0.3, 0.1]), Distribution([0.2, 0.7, 0.1])).probs, [1, 0, 0])

    def test_equal_inputs_fall_back_to_target(self):
        p = Distribution([0.2, 0.3, 0.5])
        assert residual(p, p) is p


class TestExactLosslessness:
    def test_library_enumerator_matches_oracle_and_target(self):
        gen = np.random.default_rng(0)
        for V in range(2, 9):
            for _ in range(60):
                p = Distribution(random_dist(gen, V))
                q = Distribution(random_dist(gen, V))
                law = kernel_marginal(p, q)
                np.testing.assert_allclose(law, kernel_output_law(p.probs, q.probs), atol=1e-12)
                assert 0.5 * np.abs(law - p.probs).sum() < 1e-12

    def test_verify_window_branch_walk_vocab2(self):
        # walk every (proposal, coin, correction) branch of verify_window with gamma = 1
        for pv in simplex_grid(2, 8):
            for qv in simplex_grid(2, 8):
                p, q = Distribution(pv), Distribution(qv)
                target = const_model(pv)
                law = np.zeros(2)
                pos = np.maximum(pv - qv, 0)
                r = pos / pos.sum() if pos.sum() > 0 else pv
                for x in range(2):
                    if qv[x] == 0:
                        continue
                    a = min(1.0, pv[x] / qv[x])
                    if a > 0:
                        res = verify_window(target, PREFIX, (), [x], [q], FixedUniforms(a / 2), bonus=False)
                        assert res.emitted == (x,) and not res.corrected
                        law[x] += qv[x] * a
                    if a < 1:
                        cdf = np.concatenate([[0.0], np.cumsum(r)])
                        for y in range(2):
                            if r[y] == 0:
                                continue
                            u = 0.5 * (cdf[y] + cdf[y + 1])
                            res = verify_window(target, PREFIX, (), [x], [q], FixedUniforms((1 + a) / 2),
                                                resample_rng=FixedUniforms(u), bonus=False)
                            assert res.emitted == (y,) and res.corrected and res.accepted_count == 0
                            law[y] += qv[x] * (1 - a) * r[y]
                assert 0.5 * np.abs(law - pv).sum() < 1e-12


class TestVerifyWindow:
    def test_aligned_pair_accepts_everything_and_adds_bonus(self):
        d, t = synthetic(1.0, vocab=8)
        rng = SeededRng(0)
        toks, dists = draft_window(d, PREFIX, (), 4, rng.stream("draft"))
        led = TimingLedger(1.0, 7.0)
        res = verify_window(t, PREFIX, (), toks, dists, rng.stream("verify"), ledger=led)
        assert res.accepted_count == 4 and not res.corrected and res.n_emitted == 5
        assert res.emitted[:4] == toks
        assert led.verifications == 1 and led.elapsed_ms == 7.0

    def test_scripted_mask_rejects_third_token(self, fig6_pair):
        draft, target = fig6_pair
        ctx = (0, 1, 2)
        toks, dists = draft_window(draft, PREFIX, ctx, 3, SeededRng(0))
        assert toks == (3, 4, 7)
        res = verify_window(target, PREFIX, ctx, toks, dists, SeededRng(0))
        assert res.accepted_count == 2 and res.corrected and res.emitted == (3, 4, 5)
        assert target.decode([res.emitted[-1]]) == ["for"]

    def test_no_bonus_mode(self):
        d, t = synthetic(1.0, vocab=8)
        toks, dists = draft_window(d, PREFIX, (), 3, SeededRng(1))
        res = verify_window(t, PREFIX, (), toks, dists, SeededRng(2), bonus=False)
        assert res.emitted == toks

    def test_input_errors(self):
        d, t = synthetic(0.5, vocab=8)
        with pytest.raises(ValueError):
            verify_window(t, PREFIX, (), [], [], SeededRng(0))
        with pytest.raises(ValueError):
            verify_window(t, PREFIX, (), [1], [], SeededRng(0))

    def test_accepted_count_follows_truncated_geometric(self):
        tau, gamma = 0.6, 4
        d, t = synthetic(tau, vocab=8, seed=2)
        rng = SeededRng(5)
        counts = np.zeros(gamma + 1)
        for i in range(20_000):
            ctx = (i % 7, i % 5)
            toks, dists = draft_window(d, PREFIX, ctx, gamma, rng.stream("d", i))
            counts[verify_window(t, PREFIX, ctx, toks, dists, rng.stream("v", i)).accepted_count] += 1
        expected = trunc_geo_pmf(tau, gamma) * counts.sum()
        assert stats.chisquare(counts, expected).pvalue > 0.001


class TestVanilla:
    def test_full_acceptance_timing(self):
        d, t = synthetic(1.0, vocab=8)
        tm = TimingModel.constant(1.0, 5.0)
        toks, st = vanilla_sd_generate(d, t, PREFIX, 600, WindowConfig(5), SeededRng(0), timing=tm)
        assert len(toks) == 600
        assert st.M == 6.0
        assert st.per_token_ms == pytest.approx((5 * 1.0 + 5.0) / 6, abs=1e-12)
        assert st.rounds == 100

    def test_zero_alignment_emits_one_token_per_round(self):
        d, t = synthetic(0.0, vocab=8)
        toks, st = vanilla_sd_generate(d, t, PREFIX, 50, WindowConfig(3), SeededRng(0))
        assert st.M == 1.0 and st.rounds == 50 and st.acceptance_rate == 0.0

    def test_seed_determinism(self):
        d, t = synthetic(0.6, vocab=8)
        a = vanilla_sd_generate(d, t, PREFIX, 40, WindowConfig(3), SeededRng(9))
        b = vanilla_sd_generate(d, t, PREFIX, 40, WindowConfig(3), SeededRng(9))
        assert a == b

    def test_matches_exact_ngram_marginals(self):
        # order-1 draft and target with computable per-position laws
        V = 3
        target = NgramModel.random(Vocab(V), 1, SeededRng(1))
        draft = NgramModel.random(Vocab(V), 1, SeededRng(2))
        K, runs = 4, 10_000
        out = np.array([vanilla_sd_generate(draft, target, PREFIX, K, WindowConfig(2), SeededRng(s))[0]
                        for s in range(runs)])
        exact = target.exact_marginals(PREFIX, K)
        for k in range(K):
            counts = np.bincount(out[:, k], minlength=V)
            assert stats.chisquare(counts, exact[k] * runs).pvalue > 0.001


class TestAcceptanceRatio:
    def test_self_reference_is_one(self):
        _, t = synthetic(0.5, vocab=8)
        out = autoregressive_generate(t, PREFIX, 200, SeededRng(0))
        assert measure_acceptance_ratio(t, PREFIX, out, t) == 1.0

    def test_disjoint_support_is_zero(self):
        d, t = synthetic(0.0, vocab=8)
        out = autoregressive_generate(d, PREFIX, 200, SeededRng(0))
        assert measure_acceptance_ratio(t, PREFIX, out, d) == 0.0

    def test_half_mixture_matches_calibrated_rate(self):
        d, t = synthetic(0.5, vocab=16)
        out = autoregressive_generate(d, PREFIX, 10_000, SeededRng(0))
        assert abs(measure_acceptance_ratio(t, PREFIX, out, d) - 0.5) <= 0.03

    def test_empty_output_rejected(self):
        _, t = synthetic(0.5)
        with pytest.raises(ValueError):
            measure_acceptance_ratio(t, PREFIX, (), t)


def test_window_config_validation():
    with pytest.raises(ValueError):
        WindowConfig(0)
