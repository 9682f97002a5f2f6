"""How the draft-side pruning ratio trades acceptance against draft speed.

Pruning more video tokens makes the draft faster (a larger speed ratio c and a
larger window) but less aligned with the target. Speedup peaks at a high but
not total pruning ratio; pruning everything collapses acceptance.

    python3 demos/alpha_sweep.py [seeds]
"""

import sys

import numpy as np

from specpipe.experiments import ExperimentConfig, build_models, build_prefix, run_once
from specpipe.theory import parallelvlm_speedup

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 20
cfg = ExperimentConfig()
models = build_models(cfg)
timing = cfg.timing_model()

print(f"preset {cfg.preset}, K={cfg.K}, {seeds} seeds per point")
print(f"{'alpha':>6} {'gamma':>6} {'c*':>6} {'tau_hat':>8} {'M':>7} {'speedup':>8} {'tau_hat*c*':>11}")
for alpha in (0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 1.0):
    prefix = build_prefix(cfg, alpha=alpha)
    rows = [run_once(cfg, s, models=models, prefix=prefix, alpha=alpha) for s in range(seeds)]
    tau = np.mean([r[1].acceptance_rate for r in rows])
    M = np.mean([r[1].M for r in rows])
    sp = np.mean([r[1].speedup_vs_autoregressive for r in rows])
    pred = parallelvlm_speedup(float(tau), alpha, timing).speedup_vs_ar
    print(f"{alpha:6.2f} {rows[0][3]:6d} {timing.c_star(alpha):6.2f} {tau:8.3f} {M:7.2f} {sp:8.2f} {pred:11.2f}")
