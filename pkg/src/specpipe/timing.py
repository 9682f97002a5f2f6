"""Forward-pass timing model and the window-size rule derived from it."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class TimingModel:
    """Draft and target forward times in milliseconds.

    ``t_draft(alpha)`` is linear interpolation over ``(draft_alphas,
    draft_times)``, held flat outside the table. Prefill times are optional;
    without them the prefill stage is treated as free and hidden.
    """

    t_target: float
    draft_alphas: tuple = (0.0,)
    draft_times: tuple = (1.0,)
    prefill_target: Optional[float] = None
    prefill_draft: Optional[float] = None
    broadcast_fraction: float = 0.25
    prune_cost: float = 10.0
    name: str = "custom"
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "draft_alphas", tuple(float(a) for a in self.draft_alphas))
        object.__setattr__(self, "draft_times", tuple(float(t) for t in self.draft_times))
        a, t = self.draft_alphas, self.draft_times
        if len(a) != len(t) or not a:
            raise ValueError("draft_alphas and draft_times must be non-empty and equally long")
        if any(x < 0 or x > 1 for x in a) or any(a[i] >= a[i + 1] for i in range(len(a) - 1)):
            raise ValueError("draft_alphas must be strictly increasing within [0, 1]")
        if any(x <= 0 for x in t) or self.t_target <= 0:
            raise ValueError("forward times must be positive")
        if any(t[i] < t[i + 1] for i in range(len(t) - 1)):
            raise ValueError("draft time must not grow with the pruning ratio")
        if not 0 < self.broadcast_fraction < 1:
            raise ValueError("broadcast_fraction must lie in (0, 1)")
        if self.prune_cost < 0:
            raise ValueError("prune_cost must be >= 0")
        if (self.prefill_target is None) != (self.prefill_draft is None):
            raise ValueError("give both prefill times or neither")

    @classmethod
    def constant(cls, t_draft: float, t_target: float, **kw) -> "TimingModel":
        return cls(t_target=t_target, draft_alphas=(0.0,), draft_times=(t_draft,), **kw)

    @property
    def t_draft_full(self) -> float:
        return self.t_draft(0.0)

    def t_draft(self, alpha: float) -> float:
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        return float(np.interp(alpha, self.draft_alphas, self.draft_times))

    @property
    def c(self) -> float:
        return self.t_target / self.t_draft_full

    def c_star(self, alpha: float) -> float:
        return self.t_target / self.t_draft(alpha)

    @property
    def has_prefill(self) -> bool:
        return self.prefill_target is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["draft_alphas"] = list(self.draft_alphas)
        d["draft_times"] = list(self.draft_times)
        return d

    @classmethod
    def from_dict(cls, d: dict, name: Optional[str] = None) -> "TimingModel":
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: v for k, v in d.items() if k in known}
        if "t_draft" in d and "draft_times" not in d:
            kw["draft_times"] = (d["t_draft"],)
            kw["draft_alphas"] = (0.0,)
        if name is not None:
            kw["name"] = name
        return cls(**kw)


def load_presets() -> dict:
    text = resources.files("specpipe").joinpath("data/presets.json").read_text()
    raw = json.loads(text)["presets"]
    return {name: TimingModel.from_dict(v, name) for name, v in raw.items()}


def preset(name: str) -> TimingModel:
    presets = load_presets()
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    return presets[name]


def resolve_rounding(timing: TimingModel, alpha: float, rounding: str = "auto") -> str:
    if rounding == "auto":
        return "down" if timing.c_star(alpha) >= 2 else "up"
    if rounding not in ("down", "up"):
        raise ValueError(f"rounding must be 'down', 'up' or 'auto', got {rounding!r}")
    return rounding


def select_window(timing: TimingModel, alpha: float, rounding: str = "auto") -> int:
    """Window size from the pruned speed ratio, rounded down or up, at least 1.

    ``auto`` rounds down for ratios of 2 or more (long windows, less mutual
    waiting) and up below that (narrow self-drafting windows).
    """
    ratio = timing.c_star(alpha)
    mode = resolve_rounding(timing, alpha, rounding)
    # absorb float noise so an exact integer ratio is not pushed across a boundary
    near = round(ratio)
    if abs(ratio - near) < 1e-9:
        ratio = float(near)
    gamma = math.floor(ratio) if mode == "down" else math.ceil(ratio)
    return max(1, int(gamma))
