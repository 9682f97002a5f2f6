"""Event traces of a pipeline run: recording, JSON-lines I/O and invariant replay."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

ACTORS = ("draft", "target")
EVENTS = ("prefill", "prune", "startup-draft", "draft-token", "pre-verify", "post-verify",
          "rollback", "resample", "emit")


@dataclass
class EventTrace:
    """Ordered list of ``{"ts_ms", "actor", "event", "payload"}`` records.

    Compute events are stamped with their completion time. ``prune`` is
    stamped when the anchor-layer states reach the draft side.
    """

    events: list = field(default_factory=list)
    enabled: bool = True

    def add(self, ts_ms: float, actor: str, event: str, **payload):
        if not self.enabled:
            return
        if actor not in ACTORS or event not in EVENTS:
            raise ValueError(f"unknown actor/event {actor}/{event}")
        self.events.append({"ts_ms": float(ts_ms), "actor": actor, "event": event, "payload": payload})

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def of(self, event: str) -> list:
        return [e for e in self.events if e["event"] == event]

    def emitted_tokens(self) -> list:
        emits = sorted(self.of("emit"), key=lambda e: e["payload"]["pos"])
        return [e["payload"]["token"] for e in emits]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def write(self, path):
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "EventTrace":
        events = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = {"ts_ms", "actor", "event", "payload"} - set(rec)
            if missing:
                raise ValueError(f"line {n}: missing fields {sorted(missing)}")
            events.append(rec)
        return cls(events)

    @classmethod
    def read(cls, path) -> "EventTrace":
        return cls.from_jsonl(Path(path).read_text())


def check_trace(trace: EventTrace) -> list:
    """Replay a trace and return a list of invariant violations (empty if sound).

    Checks: known actors/events, per-actor timestamps never go back, every
    emitted position was decided by an earlier verification, emitted positions
    are contiguous from 0, post-verify only happens after a successful
    pre-verify with no rollback in between.
    """
    problems = []
    last_ts = {}
    covered = set()
    emitted = []
    in_post = False
    for i, e in enumerate(trace.events):
        actor, ev, ts, pl = e.get("actor"), e.get("event"), e.get("ts_ms"), e.get("payload", {})
        if actor not in ACTORS or ev not in EVENTS:
            problems.append(f"event {i}: unknown actor/event {actor}/{ev}")
            continue
        if not isinstance(ts, (int, float)):
            problems.append(f"event {i}: non-numeric timestamp")
            continue
        if ts < last_ts.get(actor, float("-inf")) - 1e-9:
            problems.append(f"event {i}: {actor} timestamp went back from {last_ts[actor]} to {ts}")
        last_ts[actor] = max(ts, last_ts.get(actor, ts))
        if ev in ("pre-verify", "post-verify"):
            lo, hi = pl.get("positions", [0, 0])
            covered.update(range(lo, hi))
            if ev == "post-verify" and not in_post:
                problems.append(f"event {i}: post-verify without a successful pre-verify since the last rollback")
            if ev == "pre-verify":
                in_post = bool(pl.get("accepted", 0))
        elif ev == "rollback":
            in_post = False
        elif ev == "emit":
            pos = pl.get("pos")
            if pos not in covered:
                problems.append(f"event {i}: emit at position {pos} without a covering verification")
            if pos != len(emitted):
                problems.append(f"event {i}: emit at position {pos}, expected {len(emitted)}")
            emitted.append(pos)
    return problems
