"""Autoregressive model stand-ins for the draft and target.

Three kinds are provided:

* synthetic pairs, where the draft is a mixture of the target and
  disjoint-support noise, so the per-token acceptance rate of the
  verification kernel is a single dial (``AlignmentSpec.base_alignment``);
* scripted models that replay a fixed token script, for walkthroughs;
* n-gram models with random transition tables, whose per-position output
  marginals can be computed exactly.

The mixture construction is a modelling choice of this package: nothing
prescribes how real draft/target models disagree, only that pruning the
draft's video context lowers the acceptance rate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Distribution, SeededRng, TimingLedger, Vocab, sample

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class MultimodalPrefix:
    """Video tokens, text tokens and (optionally) the draft's retained video indices."""

    video_ids: tuple
    text_ids: tuple
    retained_video: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "video_ids", tuple(int(v) for v in self.video_ids))
        object.__setattr__(self, "text_ids", tuple(int(t) for t in self.text_ids))
        if self.retained_video is not None:
            kept = tuple(int(i) for i in self.retained_video)
            if list(kept) != sorted(set(kept)):
                raise ValueError("retained_video must be sorted ascending without duplicates")
            if kept and (kept[0] < 0 or kept[-1] >= self.m):
                raise ValueError("retained_video indices fall outside 0..m-1")
            if len(kept) >= self.m:
                raise ValueError("retained_video must be a strict subset of the video tokens")
            object.__setattr__(self, "retained_video", kept)

    @property
    def m(self) -> int:
        return len(self.video_ids)

    @property
    def n(self) -> int:
        return len(self.text_ids)

    @property
    def alpha(self) -> float:
        """Fraction of video tokens the draft does not see."""
        if self.retained_video is None or self.m == 0:
            return 0.0
        return 1.0 - len(self.retained_video) / self.m

    def with_retained(self, retained) -> "MultimodalPrefix":
        return MultimodalPrefix(self.video_ids, self.text_ids, None if retained is None else tuple(retained))

    @cached_property
    def full_key(self) -> int:
        return hash((self.video_ids, self.text_ids))

    @cached_property
    def text_key(self) -> int:
        # int tag, not a str: str hashes are salted per process
        return hash((0x7E47, self.text_ids))


@dataclass(frozen=True)
class AlignmentSpec:
    base_alignment: float = 1.0
    prune_sensitivity: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.base_alignment <= 1.0:
            raise ValueError("base_alignment must lie in [0, 1]")
        if self.prune_sensitivity < 0:
            raise ValueError("prune_sensitivity must be >= 0")

    def effective(self, alpha: float) -> float:
        """Mixture weight left after pruning a fraction ``alpha`` of the video."""
        return min(1.0, max(0.0, self.base_alignment - self.prune_sensitivity * alpha))


class ModelHandle:
    """Base class: ``next_distribution`` must be a pure function of its inputs."""

    kind = "abstract"
    vocab: Vocab

    def next_distribution(self, prefix: MultimodalPrefix, suffix: Sequence[int]) -> Distribution:
        raise NotImplementedError


def next_distribution(model: ModelHandle, prefix: MultimodalPrefix, suffix) -> Distribution:
    return model.next_distribution(prefix, tuple(suffix))


def _row(key: int, bits: int) -> int:
    return ((key * _GOLDEN) & _MASK64) >> (64 - bits)


class _SyntheticBank:
    """Pre-drawn categorical rows indexed by a hash of the context."""

    _CACHE_LIMIT = 1 << 18

    def __init__(self, vocab: Vocab, gen: np.random.Generator, bits: int = 10):
        V = vocab.size
        rows = 1 << bits
        self.V = V
        self.bits = bits
        self.weights = gen.gamma(1.0, size=(rows, V)) + 1e-3
        self.text_weights = gen.gamma(1.0, size=(rows, V)) + 1e-3
        self.noise_weights = gen.gamma(1.0, size=(rows, V)) + 1e-3
        # random support split per row; both halves non-empty
        half = max(1, V // 2)
        masks = np.zeros((rows, V), dtype=bool)
        for r in range(rows):
            masks[r, gen.permutation(V)[:half]] = True
        self.masks = masks
        self._target_cache: dict = {}
        self._draft_cache: dict = {}

    def _masked(self, w, mask):
        v = w * mask
        return v / v.sum()

    def target(self, r_full: int, r_text: int) -> Distribution:
        key = (r_full, r_text)
        d = self._target_cache.get(key)
        if d is None:
            if len(self._target_cache) > self._CACHE_LIMIT:
                self._target_cache.clear()
            d = Distribution.trusted(self._masked(self.weights[r_full], self.masks[r_text]))
            self._target_cache[key] = d
        return d

    def draft(self, r_full: int, r_text: int, lam: float, sees_video: bool) -> Distribution:
        key = (r_full if sees_video else -1, r_text, lam)
        d = self._draft_cache.get(key)
        if d is None:
            if len(self._draft_cache) > self._CACHE_LIMIT:
                self._draft_cache.clear()
            mask = self.masks[r_text]
            if sees_video:
                view = self.target(r_full, r_text).probs
            else:
                view = self._masked(self.text_weights[r_text], mask)
            if lam >= 1.0:
                probs = view.copy()
            else:
                noise = self._masked(self.noise_weights[r_text], ~mask)
                probs = lam * view + (1.0 - lam) * noise
            d = Distribution.trusted(probs)
            self._draft_cache[key] = d
        return d


class SyntheticModel(ModelHandle):
    """One member of a synthetic draft/target pair (see :func:`make_synthetic_pair`)."""

    kind = "synthetic-pair-member"

    def __init__(self, bank: _SyntheticBank, role: str, spec: AlignmentSpec, vocab: Vocab):
        if role not in ("draft", "target"):
            raise ValueError(role)
        self.bank = bank
        self.role = role
        self.spec = spec
        self.vocab = vocab

    def _rows(self, prefix, suffix):
        bits = self.bank.bits
        return _row(hash((prefix.full_key, suffix)), bits), _row(hash((prefix.text_key, suffix)), bits)

    def next_distribution(self, prefix, suffix):
        r_full, r_text = self._rows(prefix, tuple(suffix))
        if self.role == "target":
            return self.bank.target(r_full, r_text)
        alpha = prefix.alpha
        sees_video = prefix.retained_video is None or len(prefix.retained_video) > 0
        return self.bank.draft(r_full, r_text, self.spec.effective(alpha), sees_video)

    def __repr__(self):
        return f"SyntheticModel(role={self.role}, {self.spec})"


def make_synthetic_pair(vocab: Vocab, spec: AlignmentSpec, rng: SeededRng, bank_bits: int = 10):
    """Build a (draft, target) pair sharing one random bank.

    With full context the target puts its mass on a per-context half of the
    vocabulary and the draft is ``lam * target + (1 - lam) * noise`` with the
    noise on the other half, so the kernel accepts with probability exactly
    ``lam`` at every position. Pruning lowers ``lam`` by
    ``prune_sensitivity * alpha``; with no video left the draft falls back to a
    text-only distribution.
    """
    bank = _SyntheticBank(vocab, rng.generator(), bits=bank_bits)
    return SyntheticModel(bank, "draft", spec, vocab), SyntheticModel(bank, "target", spec, vocab)


def calibrate_mixture_weight(vocab: Vocab, target_rate: float, rng: SeededRng,
                             events: int = 20_000, tol: float = 0.005, prefix=None) -> float:
    """Bisect the mixture weight until the measured kernel acceptance hits ``target_rate``.

    Each probe builds a pair and measures acceptance over ``events`` random
    verification events. Used as an offline check on the mixture construction.
    """
    from .specdec import measure_kernel_acceptance

    prefix = prefix or MultimodalPrefix(tuple(range(8)), (1, 2, 3))
    lo, hi = 0.0, 1.0
    for step in range(30):
        mid = 0.5 * (lo + hi)
        draft, target = make_synthetic_pair(vocab, AlignmentSpec(mid), rng.stream("calib-pair"))
        rate = measure_kernel_acceptance(draft, target, prefix, events, rng.stream("calib", step))
        if abs(rate - target_rate) <= tol:
            return mid
        if rate < target_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class ScriptedModel(ModelHandle):
    """Replays a token script.

    As a target it always puts all mass on ``script[k]`` at output position k.
    As a draft it proposes ``script[k]`` while its own context matches the
    script and ``accept_mask[k]`` is true, an alternative token when the mask
    is false, and filler tokens once its context has left the script.
    """

    kind = "scripted"

    def __init__(self, script, accept_mask=None, role="target", alternatives=None,
                 filler=None, vocab: Optional[Vocab] = None, words=None):
        self.script = tuple(int(t) for t in script)
        if not self.script:
            raise ValueError("empty script")
        self.accept_mask = tuple(bool(b) for b in (accept_mask if accept_mask is not None else [True] * len(self.script)))
        if len(self.accept_mask) != len(self.script):
            raise ValueError("accept_mask must match the script length")
        self.role = role
        self.alternatives = {int(k): int(v) for k, v in (alternatives or {}).items()}
        self.filler = tuple(int(t) for t in (filler or ()))
        ids = list(self.script) + list(self.alternatives.values()) + list(self.filler)
        self.vocab = vocab or Vocab(max(len(words or ()), max(ids) + 2))
        self.words = tuple(words) if words else None

    def _alt(self, k):
        base = self.script[min(k, len(self.script) - 1)]
        return self.alternatives.get(k, (base + 1) % self.vocab.size)

    def next_distribution(self, prefix, suffix):
        k = len(suffix)
        if self.role == "target":
            tok = self.script[min(k, len(self.script) - 1)]
        elif k < len(self.script) and tuple(suffix) == self.script[:k]:
            tok = self.script[k] if self.accept_mask[k] else self._alt(k)
        elif self.filler:
            tok = self.filler[k % len(self.filler)]
        else:
            tok = self._alt(k)
        return Distribution.point_mass(tok, self.vocab.size)

    def decode(self, ids) -> list:
        if self.words is None:
            return list(ids)
        return [self.words[i] for i in ids]


def load_scripted_pair(path) -> tuple:
    """Load ``{"script": [...], "accept_mask": [...]}`` into a (draft, target) pair.

    Optional keys: ``words`` (id -> string), ``alternatives`` (position ->
    rejected draft proposal), ``filler`` (ids the draft emits off-script).
    """
    data = json.loads(Path(path).read_text())
    return scripted_pair_from_dict(data)


def scripted_pair_from_dict(data: dict) -> tuple:
    if "script" not in data or "accept_mask" not in data:
        raise ValueError("scripted model file needs 'script' and 'accept_mask'")
    script = data["script"]
    mask = data["accept_mask"]
    words = data.get("words")
    kw = dict(alternatives=data.get("alternatives"), filler=data.get("filler"), words=words)
    probe = ScriptedModel(script, mask, **kw)
    vocab = Vocab(len(words)) if words else probe.vocab
    draft = ScriptedModel(script, mask, role="draft", vocab=vocab, **kw)
    target = ScriptedModel(script, mask, role="target", vocab=vocab, **kw)
    return draft, target


class NgramModel(ModelHandle):
    """Fixed-order Markov model over the text tokens and generated suffix."""

    kind = "ngram"

    def __init__(self, table: np.ndarray, order: int):
        table = np.asarray(table, dtype=np.float64)
        V = table.shape[-1]
        if table.shape != (V ** order, V):
            raise ValueError(f"table must have shape {(V ** order, V)}")
        if not np.allclose(table.sum(axis=1), 1.0, atol=1e-12) or np.any(table < 0):
            raise ValueError("table rows must be distributions")
        self.order = order
        self.table = table
        self.vocab = Vocab(V)
        self._rows = [Distribution.trusted(r.copy()) for r in table]

    @classmethod
    def random(cls, vocab: Vocab, order: int, rng: SeededRng, concentration: float = 1.0):
        gen = rng.generator()
        table = gen.dirichlet(np.full(vocab.size, concentration), size=vocab.size ** order)
        table = table / table.sum(axis=1, keepdims=True)
        return cls(table, order)

    def _state(self, history) -> int:
        V = self.vocab.size
        s = 0
        for tok in history[-self.order:] if self.order else ():
            s = s * V + tok
        return s

    def next_distribution(self, prefix, suffix):
        if self.order == 0:
            return self._rows[0]
        history = (tuple(t % self.vocab.size for t in prefix.text_ids) + tuple(suffix))
        if len(history) < self.order:
            history = (0,) * (self.order - len(history)) + history
        return self._rows[self._state(history)]

    def exact_marginals(self, prefix: MultimodalPrefix, K: int) -> np.ndarray:
        """Exact law of each of the first K generated tokens (orders 0 and 1)."""
        if self.order > 1:
            raise NotImplementedError("exact marginals implemented for order <= 1")
        out = np.empty((K, self.vocab.size))
        if self.order == 0:
            out[:] = self.table[0]
            return out
        start = self.next_distribution(prefix, ()).probs
        out[0] = start
        for k in range(1, K):
            out[k] = out[k - 1] @ self.table
        return out


class GreedyModel(ModelHandle):
    """Deterministic argmax wrapper; ties go to the lowest id."""

    def __init__(self, inner: ModelHandle):
        self.inner = inner
        self.vocab = inner.vocab
        self.kind = inner.kind

    def next_distribution(self, prefix, suffix):
        d = self.inner.next_distribution(prefix, suffix)
        return Distribution.point_mass(int(np.argmax(d.probs)), self.vocab.size)


def autoregressive_generate(model: ModelHandle, prefix: MultimodalPrefix, K: int, rng: SeededRng,
                            ledger: Optional[TimingLedger] = None) -> tuple:
    """Sample K tokens one forward pass at a time from ``model`` alone."""
    if K < 1:
        raise ValueError("K must be >= 1")
    out: list = []
    for _ in range(K):
        d = model.next_distribution(prefix, tuple(out))
        out.append(sample(d, rng))
        if ledger is not None:
            ledger.target_forward()
    return tuple(out)
