"""Two-stage parallel draft/verify pipeline as a discrete-event simulation.

Stage I hides the draft's pruned prefill and a first window of draft tokens
under the target's prefill. Stage II alternates between two modes:

* Pre-verify: the target checks only the first pending draft token while the
  draft keeps drafting. Used at start and after every rollback.
* Post-verify: the target checks the whole pending window in one pass while
  the draft drafts the next window. A rejection rolls the draft back to the
  accepted prefix plus the correction and returns to Pre-verify.

Token decisions use keyed random streams: draft tokens come from
``rng.stream("draft", epoch)`` where the epoch counts rollbacks, accept coins
from ``"verify"`` and corrections from ``"resample"``, each consumed in output
order. The emitted sequence therefore does not depend on how work is split
into spans, which is what lets the thread backend and the idealized
accounting modes reproduce the simulator's tokens exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

from .core import RunStats, SeededRng, sample
from .models import ModelHandle, MultimodalPrefix
from .specdec import accept_probability, verify_window
from .timing import TimingModel, resolve_rounding, select_window
from .trace import EventTrace

SEMANTICS = ("truncating", "independent", "two-round")
PRE, POST = "Pre-verify", "Post-verify"


class StartupOverflow(UserWarning):
    """The draft branch of Stage I did not fit under the target prefill."""


class EmptyWindow(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    K: int
    gamma: Optional[int] = None  # None: pick from the timing model
    alpha: float = 0.0
    rounding: str = "auto"
    acceptance_semantics: str = "truncating"

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("K must be an integer >= 1")
        if self.gamma is not None and (int(self.gamma) != self.gamma or self.gamma < 1):
            raise ValueError("gamma must be an integer >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.rounding not in ("auto", "down", "up"):
            raise ValueError("rounding must be auto, down or up")
        if self.acceptance_semantics not in SEMANTICS:
            raise ValueError(f"acceptance_semantics must be one of {SEMANTICS}")

    def window(self, timing: TimingModel) -> int:
        if self.gamma is not None:
            return int(self.gamma)
        return select_window(timing, self.alpha, self.rounding)


@dataclass
class PipelineState:
    mode: str = PRE
    accepted: list = field(default_factory=list)
    pending: list = field(default_factory=list)  # [(token, draft distribution)]
    draft_cursor: int = 0
    clock_draft: float = 0.0
    clock_target: float = 0.0
    verification_rounds: int = 0
    epoch: int = 0
    rollback_count: int = 0
    coins: int = 0
    accepted_coins: int = 0
    longest_run: int = 0
    current_run: int = 0

    @property
    def now(self) -> float:
        return max(self.clock_draft, self.clock_target)


@dataclass(frozen=True)
class Stage1Plan:
    wall_ms: float
    broadcast_ms: float
    draft_prefill_done_ms: float
    n_startup: int
    overflow: bool
    hidden: bool


def stage1_schedule(timing: TimingModel, gamma: int, alpha: float) -> Stage1Plan:
    """Stage I timing only.

    The draft waits for the target's anchor layers (``broadcast_fraction`` of
    the target prefill), prunes, prefills its pruned context (which also yields
    its first token) and then drafts up to ``gamma`` startup tokens. When that
    branch runs past the target prefill the startup window is cut to whatever
    finished by the time both prefills are done.
    """
    if not timing.has_prefill:
        return Stage1Plan(0.0, 0.0, 0.0, gamma, False, True)
    pt = timing.prefill_target
    b = timing.broadcast_fraction * pt
    pre = b + timing.prune_cost + timing.prefill_draft
    td = timing.t_draft(alpha)
    full = pre + gamma * td
    if full <= pt + 1e-9:
        return Stage1Plan(pt, b, pre, gamma, False, False)
    wall = max(pt, pre)
    n = max(0, min(gamma, int(math.floor((wall - pre) / td + 1e-9))))
    return Stage1Plan(wall, b, pre, n, True, False)


class LocalExecutor:
    """Runs draft and target work in-process, one after the other."""

    def __init__(self, draft: ModelHandle, target: ModelHandle, prefix: MultimodalPrefix, rng: SeededRng):
        self.draft_model = draft
        self.target = target
        self.prefix = prefix
        self.rng = rng
        self.verify_rng = rng.stream("verify")
        self.resample_rng = rng.stream("resample")
        self.credit_rng = rng.stream("credit")
        self.restart(0, ())

    def restart(self, epoch: int, ctx):
        self.epoch = epoch
        self.draft_rng = self.rng.stream("draft", epoch)
        self.draft_ctx = list(ctx)

    def draft(self, n: int) -> list:
        out = []
        ctx = self.draft_ctx
        for _ in range(n):
            q = self.draft_model.next_distribution(self.prefix, tuple(ctx))
            tok = sample(q, self.draft_rng)
            ctx.append(tok)
            out.append((tok, q))
        return out

    def check(self, ctx, window):
        res = verify_window(self.target, self.prefix, ctx, [t for t, _ in window], [q for _, q in window],
                            self.verify_rng, resample_rng=self.resample_rng, bonus=False)
        corr = res.emitted[-1] if res.corrected else None
        return res.accepted_count, corr

    def span(self, n_draft: int, ctx, window):
        """Draft ``n_draft`` tokens while checking ``window`` against ``ctx``.

        ``window=None`` means check the first token drafted in this span.
        """
        new = self.draft(n_draft)
        if window is None:
            window = new[:1]
        j, corr = self.check(ctx, window)
        return new, window, j, corr

    def credit(self, ctx, window, j: int) -> int:
        """Independent coins for window tokens after a rejection at ``j``."""
        got = 0
        ctx = list(ctx) + [t for t, _ in window[: j + 1]]
        for tok, q in window[j + 1:]:
            p = self.target.next_distribution(self.prefix, tuple(ctx))
            if self.credit_rng.random() < accept_probability(p, q, tok):
                got += 1
            ctx.append(tok)
        return got

    def close(self):
        pass


@dataclass
class PipelineRun:
    tokens: tuple
    stats: RunStats
    trace: EventTrace
    rounds: list  # (mode, window_size, accepted)
    state: PipelineState
    stage1: Stage1Plan
    gamma: int
    stage2_ms: float


class PipelineEngine:
    """State machine for one generation request.

    Use :meth:`run`, or drive it by hand with :meth:`stage1`,
    :meth:`step_pre_verify` and :meth:`step_post_verify`.
    """

    def __init__(self, draft: ModelHandle, target: ModelHandle, prefix: MultimodalPrefix,
                 timing: TimingModel, config: PipelineConfig, rng: SeededRng,
                 executor=None, trace: bool = True):
        self.prefix = prefix
        self.timing = timing
        self.config = config
        self.gamma = config.window(timing)
        self.t_d = timing.t_draft(config.alpha)
        self.t_p = timing.t_target
        self.exec = executor or LocalExecutor(draft, target, prefix, rng)
        self.trace = EventTrace(enabled=trace)
        self.state = PipelineState()
        self.rounds: list = []
        self.plan: Optional[Stage1Plan] = None
        self.emitted_total = 0

    # bookkeeping -----------------------------------------------------------

    def _emit(self, ts, tokens, source):
        st = self.state
        for tok in tokens:
            self.trace.add(ts, "target", "emit", pos=len(st.accepted), token=int(tok), source=source)
            st.accepted.append(int(tok))
        self.emitted_total += len(tokens)

    def _count(self, j, window_len, corrected):
        st = self.state
        st.coins += j + (1 if corrected else 0)
        st.accepted_coins += j
        st.current_run += j
        st.longest_run = max(st.longest_run, st.current_run)
        if corrected:
            st.current_run = 0

    def _rollback(self, ts, corr):
        st = self.state
        st.pending = []
        st.epoch += 1
        st.rollback_count += 1
        st.mode = PRE
        self.exec.restart(st.epoch, st.accepted)
        st.draft_cursor = len(st.accepted)
        self.trace.add(ts, "draft", "rollback", to=len(st.accepted), epoch=st.epoch)

    def draft_context(self) -> tuple:
        """The draft worker's logical context (its KV cache contents)."""
        return tuple(self.exec.draft_ctx)

    # Stage I ----------------------------------------------------------------

    def stage1(self):
        st = self.state
        plan = stage1_schedule(self.timing, self.gamma, self.config.alpha)
        self.plan = plan
        if plan.overflow:
            warnings.warn(f"startup window cut to {plan.n_startup} of {self.gamma} tokens", StartupOverflow)
        tr = self.trace
        if not plan.hidden:
            tr.add(plan.broadcast_ms, "draft", "prune", alpha=self.config.alpha,
                   done_ms=plan.broadcast_ms + self.timing.prune_cost)
        first = self.exec.draft(1)
        tr.add(plan.draft_prefill_done_ms, "draft", "prefill", token=int(first[0][0]))
        startup = self.exec.draft(plan.n_startup)
        for i, (tok, _) in enumerate(startup, 1):
            tr.add(plan.draft_prefill_done_ms + (0 if plan.hidden else i * self.t_d), "draft", "startup-draft",
                   token=int(tok))
        tr.add(plan.wall_ms, "target", "prefill")
        # the target prefill's last position scores the draft's first token
        j, corr = self.exec.check((), first)
        st.verification_rounds += 1
        self._count(j, 1, corr is not None)
        tr.add(plan.wall_ms, "target", "pre-verify", positions=[0, 1], accepted=j)
        st.clock_draft = st.clock_target = plan.wall_ms
        if corr is None:
            self._emit(plan.wall_ms, [first[0][0]], "accepted")
            st.mode = POST
            st.pending = list(startup)
            st.draft_cursor = 1 + len(startup)
        else:
            tr.add(plan.wall_ms, "target", "resample", pos=0, token=int(corr))
            self._emit(plan.wall_ms, [corr], "resample")
            self._rollback(plan.wall_ms, corr)
        return plan

    # Stage II spans (truncating semantics) -----------------------------------

    def _span_end(self, start, n_draft, verify):
        st = self.state
        st.clock_draft = start + n_draft * self.t_d
        st.clock_target = start + (self.t_p if verify else 0.0)
        end = max(st.clock_draft, st.clock_target)
        st.clock_draft = st.clock_target = end
        return end

    def _trace_draft(self, start, new):
        for i, (tok, _) in enumerate(new, 1):
            self.trace.add(start + i * self.t_d, "draft", "draft-token", token=int(tok))

    def step_pre_verify(self):
        st = self.state
        if st.mode != PRE:
            raise RuntimeError("step_pre_verify called in Post-verify mode")
        start = st.now
        n_draft = max(1, min(self.gamma, int(math.floor(self.t_p / self.t_d + 1e-9))))
        had_pending = bool(st.pending)
        ctx = tuple(st.accepted)
        new, window, j, corr = self.exec.span(n_draft, ctx, st.pending[:1] if had_pending else None)
        self._trace_draft(start, new)
        queue = st.pending + new
        if not queue:
            raise EmptyWindow("nothing to pre-verify")
        st.verification_rounds += 1
        self.rounds.append((PRE, 1, j))
        self._count(j, 1, corr is not None)
        ts = start + self.t_p
        pos = len(st.accepted)
        self.trace.add(ts, "target", "pre-verify", positions=[pos, pos + 1], accepted=j)
        end = self._span_end(start, n_draft, True)
        if corr is None:
            self._emit(ts, [queue[0][0]], "accepted")
            st.pending = queue[1:]
            st.mode = POST
        else:
            self.trace.add(ts, "target", "resample", pos=pos, token=int(corr))
            self._emit(ts, [corr], "resample")
            self._rollback(end, corr)
        st.draft_cursor = len(st.accepted) + len(st.pending)
        return st

    def step_post_verify(self):
        st = self.state
        if st.mode != POST:
            raise RuntimeError("step_post_verify called in Pre-verify mode")
        start = st.now
        if not st.pending:
            # nothing queued (startup overflow): a drafting-only span
            new = self.exec.draft(self.gamma)
            self._trace_draft(start, new)
            st.pending = new
            self._span_end(start, self.gamma, False)
            st.draft_cursor = len(st.accepted) + len(st.pending)
            return st
        window = st.pending
        ctx = tuple(st.accepted)
        new, _, j, corr = self.exec.span(self.gamma, ctx, window)
        self._trace_draft(start, new)
        st.verification_rounds += 1
        self.rounds.append((POST, len(window), j))
        self._count(j, len(window), corr is not None)
        ts = start + self.t_p
        pos = len(st.accepted)
        hi = pos + (j + 1 if corr is not None else len(window))
        self.trace.add(ts, "target", "post-verify", positions=[pos, hi], accepted=j, window=len(window))
        end = self._span_end(start, self.gamma, True)
        self._emit(ts, [t for t, _ in window[:j]], "accepted")
        if corr is None:
            st.pending = new
        else:
            self.trace.add(ts, "target", "resample", pos=pos + j, token=int(corr))
            self._emit(ts, [corr], "resample")
            self._rollback(end, corr)
        st.draft_cursor = len(st.accepted) + len(st.pending)
        return st

    # idealized accounting ------------------------------------------------------

    def _ideal_window(self):
        """Check one full window of gamma tokens; returns (accepted, credit, corrected)."""
        st = self.state
        need = self.gamma - len(st.pending)
        window = st.pending + (self.exec.draft(need) if need > 0 else [])
        ctx = tuple(st.accepted)
        j, corr = self.exec.check(ctx, window)
        st.verification_rounds += 1
        self.rounds.append((POST, len(window), j))
        self._count(j, len(window), corr is not None)
        self._emit(st.now, [t for t, _ in window[:j]], "accepted")
        if corr is None:
            st.pending = []
            return j, j, False
        extra = self.exec.credit(ctx, window, j)
        self._emit(st.now, [corr], "resample")
        st.pending = []
        st.epoch += 1
        st.rollback_count += 1
        self.exec.restart(st.epoch, st.accepted)
        return j, j + extra, True

    def _run_ideal(self, K):
        st = self.state
        # spans here are bookkeeping over the same coins, not a schedule; only Stage I is traced
        self.trace.enabled = False
        span = max(self.gamma * self.t_d, self.t_p)
        credit = 0
        spans = 0
        sem = self.config.acceptance_semantics
        while len(st.accepted) < K:
            if sem == "independent":
                _, c, _ = self._ideal_window()
                credit += c
                spans += 1
                st.clock_draft = st.clock_target = st.now + span
            else:
                # round two only counts if round one went through untouched
                x1, _, _ = self._ideal_window()
                x2, _, _ = self._ideal_window()
                credit += x1 + (x2 if x1 == self.gamma else 0)
                spans += 2
                st.clock_draft = st.clock_target = st.now + 2 * span
        return credit, spans

    # driver --------------------------------------------------------------------

    def run(self) -> PipelineRun:
        K = self.config.K
        st = self.state
        plan = self.stage1()
        t0 = st.now
        credit = None
        if self.config.acceptance_semantics == "truncating":
            while len(st.accepted) < K:
                if st.mode == PRE:
                    self.step_pre_verify()
                else:
                    self.step_post_verify()
        else:
            credit, _ = self._run_ideal(K)
        stage2 = st.now - t0
        tokens = tuple(st.accepted[:K])
        stats = self._stats(K, stage2, credit)
        return PipelineRun(tokens, stats, self.trace, self.rounds, st, plan, self.gamma, stage2)

    def _stats(self, K, stage2, credit):
        st = self.state
        if credit is None:
            per_token = stage2 / K
            speedup = K * self.t_p / stage2 if stage2 > 0 else math.inf
        else:
            per_token = stage2 / credit if credit else math.inf
            speedup = self.t_p / per_token if credit else 0.0
        n_rounds = len(self.rounds)
        return RunStats(
            K=K,
            M=self.emitted_total / (st.rollback_count + 1),
            acceptance_rate=st.accepted_coins / st.coins if st.coins else 1.0,
            per_token_ms=per_token,
            speedup_vs_autoregressive=speedup,
            total_latency_ms=stage2,
            tokens_per_second=1000.0 / per_token if per_token > 0 else math.inf,
            rollback_count=st.rollback_count,
            rounds=n_rounds,
            accepted_per_round=sum(r[2] for r in self.rounds) / n_rounds if n_rounds else 0.0,
            max_adaptive_length=st.longest_run,
            prefill_ms=self.plan.wall_ms if self.plan else 0.0,
            semantics=self.config.acceptance_semantics,
        )


def stage1_prefill(timing: TimingModel, config: PipelineConfig, draft: ModelHandle, target: ModelHandle,
                   prefix: MultimodalPrefix, rng: SeededRng):
    """Run Stage I alone; returns (trace, startup_tokens, plan)."""
    eng = PipelineEngine(draft, target, prefix, timing, config, rng)
    plan = eng.stage1()
    startup = tuple(e["payload"]["token"] for e in eng.trace.of("startup-draft"))
    return eng.trace, startup, plan


def simulate(draft, target, prefix, timing, config, rng, trace: bool = True) -> PipelineRun:
    return PipelineEngine(draft, target, prefix, timing, config, rng, trace=trace).run()


def run_pipeline(draft, target, prefix, timing, config, rng, trace: bool = True):
    """Generate ``config.K`` tokens; returns (tokens, RunStats, EventTrace)."""
    r = simulate(draft, target, prefix, timing, config, rng, trace=trace)
    return r.tokens, r.stats, r.trace
