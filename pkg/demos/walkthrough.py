"""Step through one small scripted generation and print what each actor does.

The draft proposes "The video uses Parallel VLM with a ..."; the target agrees
up to "VLM", then prefers "for" and "speedup". Watch the draft keep going while
the target verifies, and roll back when a correction lands.

    python3 demos/walkthrough.py
"""

from pathlib import Path

from specpipe import MultimodalPrefix, PipelineConfig, SeededRng, TimingModel, load_scripted_pair
from specpipe.pipeline import simulate

draft, target = load_scripted_pair(Path(__file__).parent / "data" / "walkthrough_pair.json")
prefix = MultimodalPrefix((100, 101, 102), (1, 2))
timing = TimingModel.constant(1.0, 3.0, prune_cost=0.0)  # target forward is 3x a draft forward

run = simulate(draft, target, prefix, timing, PipelineConfig(K=7, gamma=3), SeededRng(0))

for ev in run.trace:
    p = dict(ev["payload"])
    if "token" in p:
        p["word"] = target.decode([p["token"]])[0]
    detail = " ".join(f"{k}={v}" for k, v in p.items())
    print(f"t={ev['ts_ms']:5.1f}  {ev['actor']:<6} {ev['event']:<13} {detail}")

print()
print("output:", " ".join(target.decode(run.tokens)))
s = run.stats
print(f"rollbacks={s.rollback_count}  longest accepted run={s.max_adaptive_length}  "
      f"stage-II time={run.stage2_ms:g}  speedup over target-only={s.speedup_vs_autoregressive:.2f}x")
