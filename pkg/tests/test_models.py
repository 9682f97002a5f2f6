import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specpipe import SeededRng, TimingLedger, Vocab
from specpipe.models import (AlignmentSpec, GreedyModel, MultimodalPrefix, NgramModel, ScriptedModel,
                             autoregressive_generate, calibrate_mixture_weight, load_scripted_pair,
                             make_synthetic_pair, next_distribution, scripted_pair_from_dict)
from specpipe.specdec import measure_kernel_acceptance

from conftest import synthetic

PREFIX = MultimodalPrefix(tuple(range(200, 232)), (5, 6, 7))


class TestPrefix:
    def test_valid_and_alpha(self):
        p = MultimodalPrefix((10, 11, 12, 13), (1,), (0, 2))
        assert (p.m, p.n, p.alpha) == (4, 1, 0.5)
        assert MultimodalPrefix((10, 11), (1,)).alpha == 0.0
        assert MultimodalPrefix((10, 11), (1,), ()).alpha == 1.0

    @pytest.mark.parametrize("retained", [(2, 0), (0, 0), (4,), (-1,), (0, 1, 2, 3)])
    def test_invalid_retained(self, retained):
        with pytest.raises(ValueError):
            MultimodalPrefix((10, 11, 12, 13), (1,), retained)

    def test_keys_ignore_retained_but_track_content(self):
        a = MultimodalPrefix((1, 2, 3), (4,))
        assert a.full_key == a.with_retained((0,)).full_key
        assert a.full_key != MultimodalPrefix((1, 2, 9), (4,)).full_key
        assert a.text_key == MultimodalPrefix((7, 8), (4,)).text_key


def test_alignment_effective_is_non_increasing():
    spec = AlignmentSpec(0.9, 0.3)
    vals = [spec.effective(a) for a in np.linspace(0, 1, 11)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))
    assert spec.effective(1.0) == pytest.approx(0.6)
    assert AlignmentSpec(0.1, 1.0).effective(1.0) == 0.0
    with pytest.raises(ValueError):
        AlignmentSpec(1.1)
    with pytest.raises(ValueError):
        AlignmentSpec(0.5, -0.1)


class TestScripted:
    def test_target_point_mass_on_script(self):
        t = ScriptedModel([4, 5, 6])
        d = t.next_distribution(PREFIX, ())
        assert d.probs[4] == 1.0
        assert autoregressive_generate(t, PREFIX, 3, SeededRng(0)) == (4, 5, 6)

    def test_draft_follows_mask_and_filler(self, fig6_pair):
        draft, target = fig6_pair
        assert np.argmax(draft.next_distribution(PREFIX, (0, 1, 2, 3, 4)).probs) == 7  # "method"
        assert np.argmax(draft.next_distribution(PREFIX, (0, 1, 2, 3, 4, 5)).probs) == 8  # "a"
        assert np.argmax(draft.next_distribution(PREFIX, (0, 1, 2, 3, 4, 7)).probs) == 9  # off script
        assert target.decode((0, 3, 4)) == ["The", "Parallel", "VLM"]

    def test_load_errors(self, tmp_path):
        with pytest.raises(ValueError):
            scripted_pair_from_dict({"script": [1, 2]})
        with pytest.raises(ValueError):
            scripted_pair_from_dict({"script": [1, 2], "accept_mask": [True]})
        path = tmp_path / "s.json"
        path.write_text('{"script": [0, 1], "accept_mask": [true, false]}')
        d, t = load_scripted_pair(path)
        assert t.vocab.size >= 3


class TestSynthetic:
    def test_perfect_alignment_gives_identical_distributions(self):
        d, t = synthetic(1.0, vocab=16)
        for ctx in [(), (1,), (3, 4, 5)]:
            assert np.array_equal(d.next_distribution(PREFIX, ctx).probs, t.next_distribution(PREFIX, ctx).probs)

    def test_no_video_draft_ignores_video_ids(self):
        d, t = synthetic(0.8, vocab=16, sensitivity=0.1)
        a = MultimodalPrefix((1, 2, 3, 4), (9, 9), ())
        b = MultimodalPrefix((50, 60, 70, 80), (9, 9), ())
        for ctx in [(), (2,), (2, 3)]:
            assert np.array_equal(d.next_distribution(a, ctx).probs, d.next_distribution(b, ctx).probs)
        # the target still sees the video
        assert not np.array_equal(t.next_distribution(a, ()).probs, t.next_distribution(b, ()).probs)

    def test_pruning_changes_draft_only(self):
        d, t = synthetic(0.9, vocab=16, sensitivity=0.2)
        pruned = PREFIX.with_retained(tuple(range(0, 32, 2)))
        assert np.array_equal(t.next_distribution(PREFIX, (1,)).probs, t.next_distribution(pruned, (1,)).probs)
        assert not np.array_equal(d.next_distribution(PREFIX, (1,)).probs, d.next_distribution(pruned, (1,)).probs)

    @given(st.lists(st.integers(0, 15), max_size=6))
    @settings(max_examples=50, deadline=None)
    def test_purity(self, suffix):
        d, t = synthetic(0.7, vocab=16)
        for m in (d, t):
            a = next_distribution(m, PREFIX, suffix)
            b = next_distribution(m, PREFIX, list(suffix))
            assert np.array_equal(a.probs, b.probs)
            assert abs(a.probs.sum() - 1.0) < 1e-12

    @pytest.mark.parametrize("tau, lo, hi", [(1.0, 1.0, 1.0), (0.5, 0.48, 0.52), (0.0, 0.0, 0.0)])
    def test_measured_acceptance_matches_alignment(self, tau, lo, hi):
        d, t = synthetic(tau, vocab=16, seed=3)
        rate = measure_kernel_acceptance(d, t, PREFIX, 100_000, SeededRng(9))
        assert lo <= rate <= hi

    def test_pruning_lowers_measured_acceptance(self):
        d, t = synthetic(0.9, vocab=16, seed=4, sensitivity=0.2)
        full = measure_kernel_acceptance(d, t, PREFIX, 20_000, SeededRng(1))
        pruned_prefix = PREFIX.with_retained(tuple(range(0, 32, 10)))  # alpha = 0.875
        pruned = measure_kernel_acceptance(d, t, pruned_prefix, 20_000, SeededRng(1))
        assert pruned <= full
        assert full - pruned > 0.1

    def test_calibration_oracle_recovers_mixture_weight(self):
        lam = calibrate_mixture_weight(Vocab(12), 0.5, SeededRng(0), events=5_000, tol=0.01)
        assert abs(lam - 0.5) < 0.03


class TestAutoregressive:
    def test_ledger_counts_one_forward_per_token(self):
        _, t = synthetic(0.5, vocab=8)
        led = TimingLedger()
        out = autoregressive_generate(t, PREFIX, 512, SeededRng(0), led)
        assert len(out) == 512 and led.target_forwards == 512

    def test_greedy_model_ignores_seed(self):
        _, t = synthetic(0.5, vocab=8)
        g = GreedyModel(t)
        runs = {autoregressive_generate(g, PREFIX, 20, SeededRng(s)) for s in range(5)}
        assert len(runs) == 1

    def test_rejects_nonpositive_K(self):
        with pytest.raises(ValueError):
            autoregressive_generate(ScriptedModel([1]), PREFIX, 0, SeededRng(0))


class TestNgram:
    def test_exact_marginals_match_simulation(self):
        m = NgramModel.random(Vocab(4), 1, SeededRng(3))
        exact = m.exact_marginals(PREFIX, 3)
        runs = np.array([autoregressive_generate(m, PREFIX, 3, SeededRng(s)) for s in range(20_000)])
        for k in range(3):
            freq = np.bincount(runs[:, k], minlength=4) / len(runs)
            assert np.abs(freq - exact[k]).max() < 0.015

    def test_table_validation(self):
        with pytest.raises(ValueError):
            NgramModel(np.ones((2, 2)), 1)
        with pytest.raises(ValueError):
            NgramModel(np.full((3, 2), 0.5), 1)
