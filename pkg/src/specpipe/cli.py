"""Command-line entry point: simulate, sweep, theory, prune-demo, replay.

Exit codes: 0 success, 2 usage or configuration error, 3 invariant violation
found by ``replay``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .experiments import SWEEP_COLUMNS, ConfigError, ExperimentConfig, SweepSpec, build_models, build_prefix, run_once, run_sweep, token_hash
from .pipeline import SEMANTICS
from .theory import theory_table
from .trace import EventTrace, check_trace
from .uvprune import DEFAULT_BAND, PruneConfig, attention_prune, boundary_concentration, make_synthetic_stack, recall, uv_prune

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT = 0, 2, 3


def _metadata() -> dict:
    return {"created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), "tool": "specpipe"}


def _dump_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = ExperimentConfig()
    over = {}
    if args.preset:
        over.update(preset=args.preset, timing=None)
    if args.seed:
        over["seeds"] = tuple(args.seed)
    if args.backend:
        over["backend"] = args.backend
    if args.semantics:
        over["acceptance_semantics"] = args.semantics
    if getattr(args, "alpha", None) is not None:
        over["alpha"] = args.alpha
    if getattr(args, "gamma", None) is not None:
        over["gamma"] = args.gamma if args.gamma == "auto" else int(args.gamma)
    if getattr(args, "K", None) is not None:
        over["K"] = args.K
    if getattr(args, "method", None):
        over["method"] = args.method
    if getattr(args, "scripted", None):
        over["scripted"] = args.scripted
    if args.out:
        over["output_path"] = args.out
    if over:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **over})
    cfg.timing_model()  # fail early on an unknown preset
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    models = build_models(cfg)
    prefix = build_prefix(cfg)
    runs = []
    for i, seed in enumerate(cfg.seeds):
        want_trace = bool(args.trace) and i == 0 and cfg.backend == "sim"
        tokens, stats, trace, gamma = run_once(cfg, seed, models=models, prefix=prefix, trace=want_trace)
        if want_trace:
            problems = check_trace(trace)
            if problems:
                for p in problems:
                    print(f"trace invariant violated: {p}", file=sys.stderr)
                return EXIT_INVARIANT
            trace.write(args.trace)
        runs.append({"seed": seed, "gamma": gamma, "token_hash": token_hash(tokens), "tokens": list(tokens),
                     "stats": stats.to_dict()})
    mean = lambda key: float(np.mean([r["stats"][key] for r in runs]))
    summary = {"gamma": runs[0]["gamma"], "M": mean("M"), "tau_hat": mean("acceptance_rate"),
               "speedup": mean("speedup_vs_autoregressive"), "per_token_ms": mean("per_token_ms"),
               "runs": len(runs)}
    if cfg.backend == "concurrent":
        # wall-clock numbers differ run to run; keep them out of the reproducible part
        result = {"config": cfg.to_dict(), "summary": {"gamma": summary["gamma"], "runs": len(runs)},
                  "runs": [{k: r[k] for k in ("seed", "gamma", "token_hash", "tokens")} for r in runs],
                  "metadata": {**_metadata(), "wall_clock": {"summary": summary, "stats": [r["stats"] for r in runs]}}}
    else:
        result = {"config": cfg.to_dict(), "summary": summary, "runs": runs, "metadata": _metadata()}
    _dump_json(result, cfg.output_path)
    print(f"gamma={summary['gamma']} M={summary['M']:.3f} tau_hat={summary['tau_hat']:.3f} "
          f"speedup={summary['speedup']:.3f} backend={cfg.backend} seeds={len(runs)}",
          file=sys.stderr if not cfg.output_path else sys.stdout)
    return EXIT_OK


def _parse_grid(text: str) -> tuple:
    if text is None or not text.strip():
        raise ConfigError("sweep grid is empty")
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad grid {text!r}; expected comma-separated numbers") from None


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    grid = _parse_grid(args.grid)
    if args.variable == "gamma":
        grid = tuple(int(v) if float(v).is_integer() else v for v in grid)
    spec = SweepSpec(args.variable, grid, repeats=args.repeats, mode=args.mode)
    rows = run_sweep(spec, cfg)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    if cfg.output_path:
        Path(cfg.output_path).write_text(buf.getvalue())
        meta = Path(str(cfg.output_path) + ".meta.json")
        _dump_json({"config": cfg.to_dict(), "sweep": {"variable": spec.variable, "grid": list(spec.grid),
                                                      "repeats": spec.repeats, "mode": spec.mode},
                    "metadata": _metadata()}, meta)
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_theory(args) -> int:
    if not 0.0 <= args.tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {args.tau}")
    c = args.c if args.c is not None else float(args.gamma)
    reps = theory_table(args.tau, args.gamma, c, args.t)
    rows = [{"model": r.name, "regime": r.regime, "per_token_time": r.per_token_time, "speedup": r.speedup_vs_ar}
            for r in reps]
    if args.json:
        _dump_json({"inputs": {"tau": args.tau, "gamma": args.gamma, "c": c, "t": args.t}, "rows": rows}, args.out)
        return EXIT_OK
    lines = [f"tau={args.tau} gamma={args.gamma} c={c} t={args.t}",
             f"{'model':<18} {'regime':<10} {'per_token_time':>15} {'speedup':>9}"]
    for r in rows:
        lines.append(f"{r['model']:<18} {r['regime']:<10} {r['per_token_time']:>15.6g} {r['speedup']:>9.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_prune_demo(args) -> int:
    if args.m < 2 or args.n < 1 or args.d < 3 or args.L < 1:
        raise ConfigError("need m >= 2, n >= 1, d >= 3, L >= 1")
    if not 0.0 <= args.alpha < 1.0:
        raise ConfigError("alpha must lie in [0, 1)")
    if args.sink_strength < 0:
        raise ConfigError("sink strength must be >= 0")
    frames = min(args.frames, args.m)
    cfg = PruneConfig(args.alpha, L=args.L)
    k = cfg.k_keep(args.m)
    gen = np.random.default_rng(args.seed)
    planted = np.sort(gen.choice(args.m, size=k, replace=False))
    stack, attn = make_synthetic_stack(args.m, args.n, args.d, args.L, planted, args.delta, args.sink_strength,
                                       gen, frames=frames)
    uv = uv_prune(stack, cfg)
    at = attention_prune(attn, cfg)
    band = [b for b in DEFAULT_BAND if b < frames]
    kept_uv, kept_at = set(uv.retained), set(at.retained)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["token_index", "frame", "uv_score", "attention_score", "retained_uv", "retained_attn"])
    for i in range(args.m):
        w.writerow([i, int(stack.frame_map[i]), repr(float(uv.scores.delta_s[i])), repr(float(attn[i])),
                    int(i in kept_uv), int(i in kept_at)])
    summary = {
        "m": args.m, "n": args.n, "d": args.d, "L": args.L, "alpha": args.alpha, "k_keep": k,
        "sink_strength": args.sink_strength, "seed": args.seed, "band_frames": band,
        "recall_uv": recall(uv, planted), "recall_attn": recall(at, planted),
        "boundary_concentration_uv": boundary_concentration(uv, stack.frame_map, band),
        "boundary_concentration_attn": boundary_concentration(at, stack.frame_map, band),
    }
    if args.out:
        Path(args.out).write_text(buf.getvalue())
        _dump_json({"summary": summary, "metadata": _metadata()}, Path(str(args.out) + ".summary.json"))
    else:
        sys.stdout.write(buf.getvalue())
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_replay(args) -> int:
    path = Path(args.trace)
    if not path.is_file():
        raise ConfigError(f"trace file not found: {path}")
    try:
        trace = EventTrace.read(path)
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse trace: {exc}") from None
    problems = check_trace(trace)
    for p in problems:
        print(f"violation: {p}", file=sys.stderr)
    n_emit = len(trace.of("emit"))
    print(f"{len(trace)} events, {n_emit} tokens emitted, {len(problems)} violations")
    return EXIT_INVARIANT if problems else EXIT_OK


def _add_common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--preset", help="named timing preset")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
    p.add_argument("--backend", choices=["sim", "concurrent"])
    p.add_argument("--semantics", choices=list(SEMANTICS))
    p.add_argument("--out", help="output file (default stdout)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", help="window size or 'auto'")
    p.add_argument("--K", type=int, help="tokens to generate")
    p.add_argument("--method", choices=["pipeline", "vanilla"])
    p.add_argument("--scripted", help="scripted model JSON instead of a synthetic pair")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="specpipe", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run generations and write RunStats as JSON")
    _add_common(p)
    p.add_argument("--trace", help="write the first seed's event trace as JSON lines")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="sweep one variable and write CSV rows")
    _add_common(p)
    p.add_argument("--variable", required=True, choices=["alpha", "tau", "gamma", "c"])
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--repeats", type=int, default=1, help="seeds 0..repeats-1 when --seed is not given")
    p.add_argument("--mode", choices=["sim", "theory"], default="sim")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("theory", help="print closed-form per-token times and speedups")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--gamma", type=int, required=True)
    p.add_argument("--c", type=float, help="speed ratio (default: gamma)")
    p.add_argument("--t", type=float, default=1.0, help="draft forward time")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("prune-demo", help="compare pruning methods on a synthetic stack")
    p.add_argument("--m", type=int, default=1024)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--L", type=int, default=20)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--sink-strength", type=float, default=2.0)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--frames", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path; a .summary.json is written next to it")
    p.set_defaults(func=cmd_prune_demo)

    p = sub.add_parser("replay", help="re-check the invariants of a JSON-lines trace")
    p.add_argument("trace")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
