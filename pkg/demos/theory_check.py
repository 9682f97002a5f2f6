"""Closed-form speedups next to simulated ones over a grid of acceptance rates.

Uses a synthetic pair whose per-token acceptance is exactly tau, with the
target forward c times the draft forward and window gamma = c.

The sequential and overlapped closed forms credit tau * gamma tokens per
window, whereas a real window stops at the first rejection. That is why the
simulated sequential column falls short at low tau. The overlapped "sim"
column uses independent crediting, which is the model that closed form
describes. The last column is the real pipeline with rollbacks.

    python3 demos/theory_check.py
"""

from specpipe import AlignmentSpec, MultimodalPrefix, SeededRng, TimingModel, Vocab, make_synthetic_pair
from specpipe.pipeline import PipelineConfig, simulate
from specpipe.specdec import WindowConfig, vanilla_sd_generate
from specpipe.theory import parallel_rollback_time, parallel_sd_time, vanilla_sd_time

gamma = c = 5
K, seeds = 2000, 5
prefix = MultimodalPrefix(tuple(range(500, 516)), (1, 2, 3))
timing = TimingModel.constant(1.0, float(c))

print(f"gamma = c = {c}; simulated numbers average {seeds} runs of {K} tokens")
print(f"{'tau':>5} | {'vanilla':>8} {'sim':>6} | {'overlap':>8} {'sim':>6} | {'two-span':>8} {'sim':>6} | "
      f"{'pipeline sim':>12}")
for tau in (0.5, 0.7, 0.8, 0.9, 0.95, 1.0):
    draft, target = make_synthetic_pair(Vocab(16), AlignmentSpec(tau), SeededRng(1))

    def sim(sem):
        out = []
        for s in range(seeds):
            r = simulate(draft, target, prefix, timing, PipelineConfig(K=K, gamma=gamma, acceptance_semantics=sem),
                         SeededRng(s), trace=False)
            out.append(r.stats.speedup_vs_autoregressive)
        return sum(out) / len(out)

    van = sum(vanilla_sd_generate(draft, target, prefix, K, WindowConfig(gamma), SeededRng(s), timing=timing)[1]
              .speedup_vs_autoregressive for s in range(seeds)) / seeds
    print(f"{tau:5.2f} | {vanilla_sd_time(tau, gamma, c).speedup_vs_ar:8.2f} {van:6.2f} | "
          f"{parallel_sd_time(tau, gamma, c).speedup_vs_ar:8.2f} {sim('independent'):6.2f} | "
          f"{parallel_rollback_time(tau, gamma, c).speedup_vs_ar:8.2f} {sim('two-round'):6.2f} | "
          f"{sim('truncating'):12.2f}")
