"""Rejection-sampling verification and the sequential draft-then-verify loop."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import AllZero, Distribution, RunStats, SeededRng, TimingLedger, normalize, sample, sample_with
from .models import ModelHandle, MultimodalPrefix


class DraftZeroMass(ValueError):
    """The draft proposed a token it gives zero probability."""


def accept_probability(p: Distribution, q: Distribution, token: int) -> float:
    qt = q.probs[token]
    if qt <= 0:
        raise DraftZeroMass(f"draft gives token {token} zero mass")
    pt = p.probs[token]
    return 1.0 if pt >= qt else float(pt / qt)


def residual(p: Distribution, q: Distribution) -> Distribution:
    """``norm(max(0, p - q))``; falls back to ``p`` when the residual is empty."""
    try:
        return normalize(np.maximum(p.probs - q.probs, 0.0))
    except AllZero:
        return p


@dataclass(frozen=True)
class WindowConfig:
    gamma: int

    def __post_init__(self):
        if int(self.gamma) != self.gamma or self.gamma < 1:
            raise ValueError("gamma must be an integer >= 1")


@dataclass(frozen=True)
class VerifyOutcome:
    accepted_count: int
    emitted: tuple
    corrected: bool

    @property
    def n_emitted(self) -> int:
        return len(self.emitted)


def draft_window(draft: ModelHandle, prefix: MultimodalPrefix, context: Sequence[int], n: int,
                 rng: SeededRng, ledger: Optional[TimingLedger] = None) -> tuple:
    """Draft ``n`` tokens after ``context``; returns (tokens, distributions)."""
    ctx = list(context)
    tokens, dists = [], []
    for _ in range(n):
        q = draft.next_distribution(prefix, tuple(ctx))
        tok = sample(q, rng)
        tokens.append(tok)
        dists.append(q)
        ctx.append(tok)
    if ledger is not None:
        ledger.draft_forward(n)
    return tuple(tokens), dists


def verify_window(target: ModelHandle, prefix: MultimodalPrefix, accepted: Sequence[int],
                  drafted: Sequence[int], draft_dists: Sequence[Distribution], rng: SeededRng, *,
                  resample_rng: Optional[SeededRng] = None, bonus: bool = True,
                  ledger: Optional[TimingLedger] = None) -> VerifyOutcome:
    """Check a drafted window against the target in one (batched) pass.

    Coins come from ``rng``; residual and bonus draws from ``resample_rng``
    (defaults to ``rng``). With ``bonus=False`` a fully accepted window emits
    just the drafted tokens.
    """
    if len(drafted) != len(draft_dists):
        raise ValueError("need one draft distribution per drafted token")
    if not drafted:
        raise ValueError("empty window")
    res_rng = rng if resample_rng is None else resample_rng
    ctx = tuple(accepted)
    out = []
    if ledger is not None:
        ledger.verification()
    for tok, q in zip(drafted, draft_dists):
        p = target.next_distribution(prefix, ctx)
        # one coin per checked token, even when acceptance is certain
        if rng.random() >= accept_probability(p, q, tok):
            out.append(sample(residual(p, q), res_rng))
            return VerifyOutcome(len(out) - 1, tuple(out), True)
        out.append(tok)
        ctx = ctx + (tok,)
    if bonus:
        out.append(sample(target.next_distribution(prefix, ctx), res_rng))
    return VerifyOutcome(len(drafted), tuple(out), False)


def kernel_marginal(p: Distribution, q: Distribution) -> np.ndarray:
    """Exact law of the token a one-token window emits, by enumerating branches.

    Branches: draft proposes x with prob q[x]; accept with a(x), else draw from
    the residual r. Sums P(x) a(x) on the accept branch and P(x) (1-a(x)) r[y]
    on the reject branch.
    """
    V = len(p)
    out = np.zeros(V)
    r = residual(p, q).probs
    for x in range(V):
        if q.probs[x] == 0:
            continue
        a = accept_probability(p, q, x)
        out[x] += q.probs[x] * a
        rej = q.probs[x] * (1.0 - a)
        if rej > 0:
            out += rej * r
    return out


def vanilla_sd_generate(draft: ModelHandle, target: ModelHandle, prefix: MultimodalPrefix, K: int,
                        window: WindowConfig, rng: SeededRng, timing=None):
    """Sequential speculative decoding: draft gamma tokens, then verify, repeat.

    Each round costs ``gamma * t_draft + t_target`` on the ledger. ``timing`` is
    an optional :class:`TimingModel`; without it both forwards cost 1 ms.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    gamma = window.gamma
    if timing is None:
        ledger = TimingLedger(1.0, 1.0)
    else:
        ledger = TimingLedger(timing.t_draft(prefix.alpha), timing.t_target)
    verify_rng = rng.stream("verify")
    resample_rng = rng.stream("resample")
    out: list = []
    rounds = 0
    coins = accepted_total = 0
    while len(out) < K:
        tokens, dists = draft_window(draft, prefix, out, gamma, rng.stream("draft", rounds), ledger)
        res = verify_window(target, prefix, out, tokens, dists, verify_rng,
                            resample_rng=resample_rng, ledger=ledger)
        rounds += 1
        coins += res.accepted_count + (1 if res.corrected else 0)
        accepted_total += res.accepted_count
        out.extend(res.emitted)
    emitted_total = len(out)
    out = out[:K]
    total = ledger.elapsed_ms
    t_target = ledger.t_target
    stats = RunStats(
        K=K,
        M=emitted_total / rounds,
        acceptance_rate=accepted_total / coins if coins else 1.0,
        per_token_ms=total / K,
        speedup_vs_autoregressive=K * t_target / total,
        total_latency_ms=total,
        tokens_per_second=1000.0 * K / total,
        rounds=rounds,
        accepted_per_round=accepted_total / rounds,
        max_adaptive_length=gamma + 1,
        semantics="sequential",
    )
    return tuple(out), stats


def measure_acceptance_ratio(target: ModelHandle, prefix_full: MultimodalPrefix, fixed_output: Sequence[int],
                             reference_q: ModelHandle, prefix_q: Optional[MultimodalPrefix] = None) -> float:
    """Mean kernel acceptance probability of a fixed output sequence.

    Each token of ``fixed_output`` is treated as a proposal from
    ``reference_q`` (under ``prefix_q``, default the same prefix) and checked
    against the target with full context. Returns the expected fraction
    accepted, which removes coin noise from the measurement.
    """
    if not fixed_output:
        raise ValueError("fixed_output must be non-empty")
    prefix_q = prefix_q or prefix_full
    total = 0.0
    ctx: tuple = ()
    for tok in fixed_output:
        p = target.next_distribution(prefix_full, ctx)
        q = reference_q.next_distribution(prefix_q, ctx)
        total += accept_probability(p, q, tok)
        ctx = ctx + (int(tok),)
    return total / len(fixed_output)


def measure_kernel_acceptance(draft: ModelHandle, target: ModelHandle, prefix: MultimodalPrefix,
                              events: int, rng: SeededRng, context_len: int = 4) -> float:
    """Monte Carlo acceptance rate over ``events`` single-token verifications.

    Contexts are random token strings of length ``context_len`` so that many
    distinct draft/target distributions are sampled.
    """
    gen = rng.generator()
    V = target.vocab.size
    contexts = gen.integers(0, V, size=(events, context_len))
    us = gen.random((events, 2))
    hits = 0
    for i in range(events):
        ctx = tuple(contexts[i].tolist())
        q = draft.next_distribution(prefix, ctx)
        p = target.next_distribution(prefix, ctx)
        x = sample_with(q, us[i, 0])
        if us[i, 1] < accept_probability(p, q, x):
            hits += 1
    return hits / events
