"""Real two-worker backend: draft and target run on their own threads.

Workers share nothing mutable. The coordinator sends drafting requests to the
draft worker and verification requests to the target worker over queues and
owns the emitted sequence. Each worker owns its random streams (derived from
the root seed by name), so the tokens match the simulated backend exactly.
With ``time_scale > 0`` workers also sleep for the modelled forward times,
which makes the wall-clock numbers mirror the simulated schedule.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import replace
from typing import Optional

from .core import RunStats, SeededRng, sample
from .models import ModelHandle, MultimodalPrefix
from .pipeline import PipelineConfig, PipelineEngine
from .specdec import verify_window
from .timing import TimingModel


class ChannelClosed(RuntimeError):
    """A worker died or stopped answering."""


_STOP = ("stop",)


class _Worker(threading.Thread):
    def __init__(self, name):
        super().__init__(name=name, daemon=True)
        self.inbox: queue.Queue = queue.Queue()
        self.outbox: queue.Queue = queue.Queue()

    def run(self):
        try:
            while True:
                msg = self.inbox.get()
                if msg[0] == "stop":
                    return
                self.handle(msg)
        except BaseException as exc:  # report, then die
            self.outbox.put(("error", repr(exc)))

    def handle(self, msg):
        raise NotImplementedError


class DraftWorker(_Worker):
    def __init__(self, model: ModelHandle, prefix: MultimodalPrefix, rng: SeededRng, t_forward_s: float):
        super().__init__("draft")
        self.model = model
        self.prefix = prefix
        self.rng = rng
        self.t_forward_s = t_forward_s
        self.epoch = 0
        self.stream = rng.stream("draft", 0)
        self.ctx: list = []

    def handle(self, msg):
        kind = msg[0]
        if kind == "restart":
            _, self.epoch, ctx = msg
            self.stream = self.rng.stream("draft", self.epoch)
            self.ctx = list(ctx)
        elif kind == "draft":
            _, req, n = msg
            out = []
            for _ in range(n):
                if self.t_forward_s:
                    time.sleep(self.t_forward_s)
                q = self.model.next_distribution(self.prefix, tuple(self.ctx))
                tok = sample(q, self.stream)
                self.ctx.append(tok)
                out.append((tok, q))
            self.outbox.put(("drafted", req, self.epoch, out))
        else:
            raise ValueError(f"draft worker got {kind!r}")


class TargetWorker(_Worker):
    def __init__(self, model: ModelHandle, prefix: MultimodalPrefix, rng: SeededRng, t_forward_s: float):
        super().__init__("target")
        self.model = model
        self.prefix = prefix
        self.verify_rng = rng.stream("verify")
        self.resample_rng = rng.stream("resample")
        self.t_forward_s = t_forward_s
        self.busy_s = 0.0
        self.calls = 0

    def _check(self, req, ctx, window):
        res = verify_window(self.model, self.prefix, ctx, [t for t, _ in window], [q for _, q in window],
                            self.verify_rng, resample_rng=self.resample_rng, bonus=False)
        corr = res.emitted[-1] if res.corrected else None
        self.outbox.put(("checked", req, res.accepted_count, corr))

    def handle(self, msg):
        kind = msg[0]
        t0 = time.perf_counter()
        if kind == "check":
            _, req, ctx, window = msg
            if self.t_forward_s:
                time.sleep(self.t_forward_s)
            self._check(req, ctx, window)
        elif kind == "prepare":
            # the first position only needs the accepted prefix, so start now
            _, req, ctx = msg
            self.model.next_distribution(self.prefix, tuple(ctx))
            if self.t_forward_s:
                time.sleep(self.t_forward_s)
            nxt = self.inbox.get()
            if nxt[0] != "window" or nxt[1] != req:
                raise ValueError(f"expected the window for request {req}, got {nxt[:2]}")
            self._check(req, ctx, nxt[2])
        else:
            raise ValueError(f"target worker got {kind!r}")
        self.busy_s += time.perf_counter() - t0
        self.calls += 1


class ThreadExecutor:
    """Executor for :class:`PipelineEngine` backed by two worker threads."""

    def __init__(self, draft: ModelHandle, target: ModelHandle, prefix: MultimodalPrefix, rng: SeededRng,
                 t_draft_s: float = 0.0, t_target_s: float = 0.0, reply_timeout_s: float = 60.0):
        self.draft_worker = DraftWorker(draft, prefix, rng, t_draft_s)
        self.target_worker = TargetWorker(target, prefix, rng, t_target_s)
        self.timeout = reply_timeout_s
        self.epoch = 0
        self.draft_ctx: list = []
        self._req = 0
        self.stale_dropped = 0
        self.draft_worker.start()
        self.target_worker.start()

    def _next_req(self):
        self._req += 1
        return self._req

    def _recv(self, worker, kind, req):
        while True:
            try:
                msg = worker.outbox.get(timeout=self.timeout)
            except queue.Empty:
                raise ChannelClosed(f"{worker.name} worker stopped answering") from None
            if msg[0] == "error":
                raise ChannelClosed(f"{worker.name} worker failed: {msg[1]}")
            if msg[0] != kind or msg[1] != req:
                self.stale_dropped += 1
                continue
            if kind == "drafted" and msg[2] != self.epoch:
                self.stale_dropped += 1
                continue
            return msg

    def restart(self, epoch, ctx):
        self.epoch = epoch
        self.draft_ctx = list(ctx)
        self.draft_worker.inbox.put(("restart", epoch, tuple(ctx)))

    def _send_draft(self, n):
        req = self._next_req()
        self.draft_worker.inbox.put(("draft", req, n))
        return req

    def _take_draft(self, req):
        out = self._recv(self.draft_worker, "drafted", req)[3]
        self.draft_ctx.extend(t for t, _ in out)
        return out

    def draft(self, n):
        if n == 0:
            return []
        return self._take_draft(self._send_draft(n))

    def check(self, ctx, window):
        req = self._next_req()
        self.target_worker.inbox.put(("check", req, tuple(ctx), list(window)))
        _, _, j, corr = self._recv(self.target_worker, "checked", req)
        return j, corr

    def span(self, n_draft, ctx, window):
        dreq = self._send_draft(n_draft)
        treq = self._next_req()
        if window is not None:
            self.target_worker.inbox.put(("check", treq, tuple(ctx), list(window)))
            new = self._take_draft(dreq)
        else:
            self.target_worker.inbox.put(("prepare", treq, tuple(ctx)))
            new = self._take_draft(dreq)
            window = new[:1]
            self.target_worker.inbox.put(("window", treq, list(window)))
        _, _, j, corr = self._recv(self.target_worker, "checked", treq)
        return new, window, j, corr

    def credit(self, ctx, window, j):
        raise NotImplementedError("the thread backend runs the truncating schedule only")

    def close(self):
        for w in (self.draft_worker, self.target_worker):
            w.inbox.put(_STOP)
        for w in (self.draft_worker, self.target_worker):
            w.join(timeout=5)


def run_concurrent_backend(draft: ModelHandle, target: ModelHandle, prefix: MultimodalPrefix,
                           config: PipelineConfig, rng: SeededRng, timing: Optional[TimingModel] = None,
                           time_scale: float = 0.0, trace: bool = False):
    """Run the pipeline on two threads; returns (tokens, RunStats) with wall-clock timing.

    Token decisions follow the truncating schedule whatever
    ``config.acceptance_semantics`` says; the other semantics only change how
    the simulator accounts time, never which tokens come out.
    """
    timing = timing or TimingModel.constant(1.0, 1.0)
    cfg = replace(config, acceptance_semantics="truncating")
    t_d = timing.t_draft(cfg.alpha) * time_scale / 1000.0
    t_p = timing.t_target * time_scale / 1000.0
    ex = ThreadExecutor(draft, target, prefix, rng, t_d, t_p)
    try:
        eng = PipelineEngine(draft, target, prefix, timing, cfg, rng, executor=ex, trace=trace)
        t0 = time.perf_counter()
        eng.stage1()
        t1 = time.perf_counter()
        st = eng.state
        while len(st.accepted) < cfg.K:
            if st.mode == "Pre-verify":
                eng.step_pre_verify()
            else:
                eng.step_post_verify()
        t2 = time.perf_counter()
    finally:
        ex.close()
    K = cfg.K
    sim = eng._stats(K, st.now - eng.plan.wall_ms, None)
    wall_ms = (t2 - t1) * 1000.0
    tw = ex.target_worker
    t_target_ms = 1000.0 * tw.busy_s / tw.calls if tw.calls else 0.0
    stats = replace(
        sim,
        per_token_ms=wall_ms / K,
        total_latency_ms=wall_ms,
        tokens_per_second=1000.0 * K / wall_ms if wall_ms > 0 else float("inf"),
        speedup_vs_autoregressive=K * t_target_ms / wall_ms if wall_ms > 0 else float("inf"),
        prefill_ms=(t1 - t0) * 1000.0,
        semantics=config.acceptance_semantics,
        backend="concurrent",
    )
    return tuple(st.accepted[:K]), stats
