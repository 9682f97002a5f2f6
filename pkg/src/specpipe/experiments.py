"""Experiment configuration and the runners shared by the CLI and demos."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import SeededRng, Vocab
from .models import AlignmentSpec, MultimodalPrefix, make_synthetic_pair, scripted_pair_from_dict
from .pipeline import SEMANTICS, PipelineConfig, simulate
from .specdec import WindowConfig, vanilla_sd_generate
from .theory import parallel_rollback_time, parallel_sd_time, trunc_geo_expectation
from .timing import TimingModel, preset, select_window
from .uvprune import PruneConfig, keep_count, make_synthetic_stack, uv_prune

# prune-sensitive default: acceptance 0.95 with the full video, 0.91 at alpha = 0.9
DEFAULT_ALIGNMENT = AlignmentSpec(0.95, 0.04)
BACKENDS = ("sim", "concurrent")
METHODS = ("pipeline", "vanilla")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run. Loaded from JSON; unknown keys are rejected.

    ``gamma`` is an integer or ``"auto"``. Either ``preset`` or ``timing`` (a
    mapping with TimingModel fields) must resolve to a timing model.
    """

    preset: Optional[str] = "llava-ov-7b-72b"
    timing: Optional[dict] = None
    alpha: float = 0.9
    gamma: object = "auto"
    rounding: str = "auto"
    K: int = 512
    seeds: tuple = (0,)
    acceptance_semantics: str = "truncating"
    backend: str = "sim"
    method: str = "pipeline"
    base_alignment: float = DEFAULT_ALIGNMENT.base_alignment
    prune_sensitivity: float = DEFAULT_ALIGNMENT.prune_sensitivity
    vocab: int = 32
    video_tokens: int = 64
    text_tokens: int = 4
    pair_seed: int = 7
    scripted: Optional[str] = None
    output_path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.preset is None and self.timing is None:
            raise ConfigError("give a preset or an explicit timing model")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.gamma != "auto" and (not isinstance(self.gamma, int) or self.gamma < 1):
            raise ConfigError("gamma must be a positive integer or 'auto'")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K must be a positive integer")
        if self.acceptance_semantics not in SEMANTICS:
            raise ConfigError(f"acceptance_semantics must be one of {SEMANTICS}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.rounding not in ("auto", "down", "up"):
            raise ConfigError("rounding must be auto, down or up")
        if self.video_tokens < 2 or self.text_tokens < 1:
            raise ConfigError("need at least 2 video tokens and 1 text token")
        try:
            AlignmentSpec(self.base_alignment, self.prune_sensitivity)
            Vocab(self.vocab)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def timing_model(self) -> TimingModel:
        if self.timing is not None:
            try:
                return TimingModel.from_dict(self.timing)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad timing model: {exc}") from None
        try:
            return preset(self.preset)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from None

    def window(self) -> int:
        if self.gamma == "auto":
            return select_window(self.timing_model(), self.alpha, self.rounding)
        return int(self.gamma)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(K=self.K, gamma=self.window(), alpha=self.alpha, rounding=self.rounding,
                              acceptance_semantics=self.acceptance_semantics)


def retained_for(alpha: float, m: int, n: int, seed: int) -> Optional[tuple]:
    """Video tokens the draft keeps at ratio alpha, picked by similarity-change pruning.

    alpha = 0 keeps everything (``None``), alpha = 1 keeps nothing.
    """
    if alpha <= 0.0:
        return None
    if alpha >= 1.0:
        return ()
    k = keep_count(alpha, m)
    if k >= m:
        return None
    gen = np.random.default_rng(seed)
    planted = gen.choice(m, size=k, replace=False)
    stack, _ = make_synthetic_stack(m, n, 8, 4, planted, 0.05, 0.0, gen, frames=min(m, 128))
    return uv_prune(stack, PruneConfig(alpha, L=4)).retained


def build_prefix(cfg: ExperimentConfig, alpha: Optional[float] = None) -> MultimodalPrefix:
    alpha = cfg.alpha if alpha is None else alpha
    video = tuple(1000 + i for i in range(cfg.video_tokens))
    text = tuple(range(1, cfg.text_tokens + 1))
    return MultimodalPrefix(video, text, retained_for(alpha, cfg.video_tokens, cfg.text_tokens, cfg.pair_seed))


def build_models(cfg: ExperimentConfig):
    if cfg.scripted:
        try:
            data = json.loads(Path(cfg.scripted).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scripted model file: {exc}") from None
        return scripted_pair_from_dict(data)
    spec = AlignmentSpec(cfg.base_alignment, cfg.prune_sensitivity)
    return make_synthetic_pair(Vocab(cfg.vocab), spec, SeededRng(cfg.pair_seed, (0x9A1,)))


def token_hash(tokens) -> str:
    return hashlib.sha256(",".join(str(int(t)) for t in tokens).encode()).hexdigest()[:16]


def run_once(cfg: ExperimentConfig, seed: int, models=None, prefix=None, trace: bool = False, alpha=None):
    """One generation; returns (tokens, RunStats, trace or None, gamma)."""
    draft, target = models or build_models(cfg)
    if alpha is not None:
        cfg = replace(cfg, alpha=alpha)
    prefix = prefix or build_prefix(cfg)
    timing = cfg.timing_model()
    gamma = cfg.window()
    rng = SeededRng(seed)
    if cfg.method == "vanilla":
        tokens, stats = vanilla_sd_generate(draft, target, prefix, cfg.K, WindowConfig(gamma), rng, timing=timing)
        return tokens, stats, None, gamma
    pcfg = cfg.pipeline_config()
    if cfg.backend == "concurrent":
        from .concurrent import run_concurrent_backend
        tokens, stats = run_concurrent_backend(draft, target, prefix, pcfg, rng, timing=timing)
        return tokens, stats, None, gamma
    r = simulate(draft, target, prefix, timing, pcfg, rng, trace=trace)
    return r.tokens, r.stats, (r.trace if trace else None), gamma


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    grid: tuple
    repeats: int = 1
    mode: str = "sim"

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        if self.variable not in ("alpha", "tau", "gamma", "c"):
            raise ConfigError("sweep variable must be alpha, tau, gamma or c")
        if not self.grid:
            raise ConfigError("sweep grid is empty")
        if self.mode not in ("sim", "theory"):
            raise ConfigError("sweep mode must be sim or theory")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        for v in self.grid:
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"grid value {v!r} is not a finite number")
            if self.variable in ("alpha", "tau") and not 0.0 <= v <= 1.0:
                raise ConfigError(f"{self.variable} grid values must lie in [0, 1]")
            if self.variable == "gamma" and (int(v) != v or v < 1):
                raise ConfigError("gamma grid values must be integers >= 1")
            if self.variable == "c" and v <= 0:
                raise ConfigError("c grid values must be positive")


SWEEP_COLUMNS = ("variable", "value", "seed", "M", "tau_hat", "speedup", "rollbacks", "per_token_ms")


def _point_config(cfg: ExperimentConfig, variable: str, value):
    if variable == "alpha":
        return replace(cfg, alpha=float(value))
    if variable == "tau":
        return replace(cfg, base_alignment=float(value))
    if variable == "gamma":
        return replace(cfg, gamma=int(value))
    # c: rescale the target forward so that t_target / t_draft(alpha) = c
    t_d = cfg.timing_model().t_draft(cfg.alpha)
    timing = {"t_target": float(value) * t_d, "draft_alphas": [0.0], "draft_times": [t_d], "name": f"c={value}"}
    return replace(cfg, timing=timing, preset=None)


def _theory_row(cfg: ExperimentConfig, variable: str, value):
    pcfg = _point_config(cfg, variable, value)
    tm = pcfg.timing_model()
    t = tm.t_draft(pcfg.alpha)
    c = tm.c_star(pcfg.alpha)
    tau = AlignmentSpec(pcfg.base_alignment, pcfg.prune_sensitivity).effective(pcfg.alpha)
    gamma = pcfg.window()
    if cfg.acceptance_semantics == "independent":
        rep = parallel_sd_time(tau, gamma, c, t, "practical")
    else:
        rep = parallel_rollback_time(tau, gamma, c, t)
    return {"M": trunc_geo_expectation(tau, gamma), "tau_hat": tau, "speedup": rep.speedup_vs_ar,
            "rollbacks": "", "per_token_ms": rep.per_token_time}


def run_sweep(spec: SweepSpec, cfg: ExperimentConfig) -> list:
    """Rows (dicts keyed by SWEEP_COLUMNS): one per (point, seed) in sim mode, one per point in theory mode."""
    rows = []
    seeds = cfg.seeds if len(cfg.seeds) > 1 or spec.repeats == 1 else tuple(range(spec.repeats))
    for value in spec.grid:
        if spec.mode == "theory":
            row = {"variable": spec.variable, "value": value, "seed": ""}
            row.update(_theory_row(cfg, spec.variable, value))
            rows.append(row)
            continue
        pcfg = _point_config(cfg, spec.variable, value)
        models = build_models(pcfg)
        prefix = build_prefix(pcfg)
        for seed in seeds:
            _, stats, _, _ = run_once(pcfg, seed, models=models, prefix=prefix)
            rows.append({"variable": spec.variable, "value": value, "seed": seed, "M": stats.M,
                         "tau_hat": stats.acceptance_rate, "speedup": stats.speedup_vs_autoregressive,
                         "rollbacks": stats.rollback_count, "per_token_ms": stats.per_token_ms})
    return rows
