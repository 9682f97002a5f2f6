"""Video token pruning by layer-wise change in vision-text similarity.

Each video token is scored by how much its cosine similarity to the text
tokens grows across the target's first L layers; the Top-K tokens are kept.
The score never looks at token position, which is what separates it from
attention-mass pruning (prone to attention sinks at sequence boundaries).

Also here: an attention-mass baseline, random and uniform-per-frame
baselines, a synthetic activation generator with planted relevant tokens and
optional boundary bias, and the metrics used to compare them.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_BAND = (0, 124, 125, 126, 127)  # first frame and the last four of 128 (0-based)


class ZeroNorm(ValueError):
    pass


def cosine_similarity(v, x) -> float:
    v = np.asarray(v, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    nv, nx = np.linalg.norm(v), np.linalg.norm(x)
    if nv == 0 or nx == 0:
        raise ZeroNorm("cosine similarity of a zero vector")
    return float(np.clip(v @ x / (nv * nx), -1.0, 1.0))


@dataclass
class LayerStack:
    """Video and text hidden states for layers 0..L (0 = input embeddings).

    ``video`` has shape (L+1, m, d), ``text`` (L+1, n, d); ``frame_map[i]`` is
    the (0-based) frame of video token i.
    """

    video: np.ndarray
    text: np.ndarray
    frame_map: np.ndarray

    def __post_init__(self):
        self.video = np.asarray(self.video)
        self.text = np.asarray(self.text)
        self.frame_map = np.asarray(self.frame_map, dtype=np.int64)
        if self.video.ndim != 3 or self.text.ndim != 3:
            raise ValueError("video and text must be (layers, tokens, dim) arrays")
        if self.video.shape[0] != self.text.shape[0] or self.video.shape[2] != self.text.shape[2]:
            raise ValueError("video and text disagree on layer count or width")
        if self.video.shape[0] < 2:
            raise ValueError("need at least layer 0 and one more layer")
        if self.frame_map.shape != (self.m,):
            raise ValueError("frame_map needs one frame index per video token")
        if not (np.all(np.isfinite(self.video)) and np.all(np.isfinite(self.text))):
            raise ValueError("hidden states must be finite")

    @property
    def layers(self) -> int:
        return self.video.shape[0] - 1

    @property
    def m(self) -> int:
        return self.video.shape[1]

    @property
    def n(self) -> int:
        return self.text.shape[1]

    @property
    def d(self) -> int:
        return self.video.shape[2]

    def take(self, idx) -> "LayerStack":
        """Stack restricted to (or reordered by) the given video token indices."""
        idx = np.asarray(idx, dtype=np.int64)
        return LayerStack(self.video[:, idx], self.text, self.frame_map[idx])

    def save(self, path):
        """Binary dump: 8-byte little-endian header size, JSON header, float32 video then text."""
        header = {
            "layers": self.layers + 1, "m": self.m, "n": self.n, "d": self.d,
            "dtype": "float32", "layout": "layer-major, then token-major, then dim",
            "blocks": ["video", "text"], "frame_map": self.frame_map.tolist(),
        }
        hb = json.dumps(header).encode()
        with open(path, "wb") as f:
            f.write(struct.pack("<Q", len(hb)))
            f.write(hb)
            f.write(np.ascontiguousarray(self.video, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(self.text, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "LayerStack":
        raw = Path(path).read_bytes()
        (hlen,) = struct.unpack_from("<Q", raw, 0)
        header = json.loads(raw[8:8 + hlen])
        if header.get("dtype") != "float32":
            raise ValueError("only float32 stacks are supported")
        Lp, m, n, d = header["layers"], header["m"], header["n"], header["d"]
        off = 8 + hlen
        nv = Lp * m * d
        nt = Lp * n * d
        if len(raw) != off + 4 * (nv + nt):
            raise ValueError("file size does not match the header")
        video = np.frombuffer(raw, dtype="<f4", count=nv, offset=off).reshape(Lp, m, d)
        text = np.frombuffer(raw, dtype="<f4", count=nt, offset=off + 4 * nv).reshape(Lp, n, d)
        return cls(video.astype(np.float32), text.astype(np.float32), np.array(header["frame_map"]))


def keep_count(alpha: float, m: int) -> int:
    """Tokens kept at pruning ratio alpha: round half up of (1-alpha)*m, at least 1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    # the 1e-9 keeps exact halves from rounding down after float error in 1 - alpha
    return max(1, int(math.floor((1.0 - alpha) * m + 0.5 + 1e-9)))


@dataclass(frozen=True)
class PruneConfig:
    alpha: float
    L: int = 20
    tie_break: str = "ascending-index"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.tie_break != "ascending-index":
            raise ValueError("only ascending-index tie breaking is supported")

    def k_keep(self, m: int) -> int:
        return keep_count(self.alpha, m)


@dataclass
class PruneScores:
    delta_s: np.ndarray
    per_layer: Optional[np.ndarray] = None  # (L, m): summed-over-text change at each layer


@dataclass
class PruneResult:
    retained: tuple
    scores: PruneScores
    method: str


def _unit(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNorm("zero-norm hidden state")
    return a / norms


def similarity(stack: LayerStack, L: Optional[int] = None) -> np.ndarray:
    """Cosine similarities S[l, i, j] for layers 0..L, shape (L+1, m, n)."""
    L = stack.layers if L is None else L
    v = _unit(stack.video[: L + 1].astype(np.float64))
    t = _unit(stack.text[: L + 1].astype(np.float64))
    return np.einsum("lmd,lnd->lmn", v, t)


def score_tokens(stack: LayerStack, cfg: PruneConfig) -> PruneScores:
    """Sum over layers 1..L and text tokens of S^l - S^(l-1), per video token."""
    if stack.layers < cfg.L:
        raise ValueError(f"stack has {stack.layers} layers past the embeddings, need {cfg.L}")
    S = similarity(stack, cfg.L)
    per_layer = np.diff(S, axis=0).sum(axis=2)
    return PruneScores(per_layer.sum(axis=0), per_layer)


def top_k(scores, k: int) -> tuple:
    """Indices of the k largest scores, ties to the lower index, returned sorted."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    k = min(k, scores.size)
    order = np.lexsort((np.arange(scores.size), -scores))
    return tuple(sorted(int(i) for i in order[:k]))


def uv_prune(stack: LayerStack, cfg: PruneConfig) -> PruneResult:
    scores = score_tokens(stack, cfg)
    return PruneResult(top_k(scores.delta_s, cfg.k_keep(stack.m)), scores, "uv-prune")


def attention_prune(attn_scores, cfg: PruneConfig) -> PruneResult:
    attn = np.asarray(attn_scores, dtype=np.float64)
    return PruneResult(top_k(attn, cfg.k_keep(attn.size)), PruneScores(attn), "attention")


def random_prune(m: int, cfg: PruneConfig, rng: np.random.Generator) -> PruneResult:
    k = cfg.k_keep(m)
    kept = np.sort(rng.choice(m, size=k, replace=False))
    return PruneResult(tuple(int(i) for i in kept), PruneScores(np.zeros(m)), "random")


def uniform_frame_prune(frame_map, cfg: PruneConfig) -> PruneResult:
    """Keep an equal share from every frame, earliest tokens of each frame first."""
    frame_map = np.asarray(frame_map)
    m = frame_map.size
    k = cfg.k_keep(m)
    # rank tokens by their index inside their frame, then by frame
    rank_in_frame = np.zeros(m, dtype=np.int64)
    seen: dict = {}
    for i, f in enumerate(frame_map.tolist()):
        rank_in_frame[i] = seen.get(f, 0)
        seen[f] = rank_in_frame[i] + 1
    order = np.lexsort((np.arange(m), rank_in_frame))
    kept = sorted(int(i) for i in order[:k])
    return PruneResult(tuple(kept), PruneScores(-rank_in_frame.astype(float)), "uniform-frame")


def boundary_concentration(result: PruneResult, frame_map, band_frames) -> float:
    """Share of retained tokens that sit in ``band_frames``."""
    if not result.retained:
        return 0.0
    frame_map = np.asarray(frame_map)
    band = set(int(b) for b in band_frames)
    if not band <= set(frame_map.tolist()):
        raise ValueError("band frames must be frames present in frame_map")
    frames = frame_map[list(result.retained)]
    return float(np.isin(frames, list(band)).mean())


def recall(result: PruneResult, relevant) -> float:
    relevant = set(int(i) for i in relevant)
    if not relevant:
        return 1.0
    return len(relevant & set(result.retained)) / len(relevant)


def frame_layout(m: int, frames: int) -> np.ndarray:
    """Token -> frame map with tokens spread evenly over ``frames`` frames."""
    return (np.arange(m) * frames) // m


def make_synthetic_stack(m: int, n: int, d: int, L: int, planted, delta: float, sink_strength: float,
                         rng: np.random.Generator, frames: int = 128, band=DEFAULT_BAND,
                         walk_step: float = 0.02, attn_noise: float = 0.15, text_spread: float = 0.0):
    """Synthetic hidden states plus attention scores; returns (LayerStack, attention).

    All text tokens point along one direction u (random norms; ``text_spread``
    adds per-token noise). A video token's cosine to u starts at a random
    level; for planted tokens it rises by exactly ``delta`` per layer, for the
    rest it follows a random walk pinned to end where it started (zero drift).
    Attention mass is planted-ness plus Gaussian noise plus ``sink_strength``
    on tokens of the ``band`` frames.
    """
    if d < 3:
        raise ValueError("need d >= 3")
    planted = np.asarray(sorted(set(int(i) for i in planted)), dtype=np.int64)
    if planted.size and (planted[0] < 0 or planted[-1] >= m):
        raise ValueError("planted indices outside 0..m-1")
    if delta < 0 or delta * L >= 1.8:
        raise ValueError("need 0 <= delta * L < 1.8 so similarities stay inside [-1, 1]")
    is_planted = np.zeros(m, dtype=bool)
    is_planted[planted] = True

    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)

    # cosine-to-u trajectories, shape (L+1, m)
    top = 0.9 - delta * L
    start = rng.uniform(-0.9, 0.9, size=m)
    if planted.size:
        start[is_planted] = rng.uniform(-0.9, top, size=planted.size)
    steps = rng.normal(0.0, walk_step, size=(L, m))
    steps -= steps.mean(axis=0, keepdims=True)  # bridge: net change zero
    excursion = np.vstack([np.zeros(m), np.cumsum(steps, axis=0)])
    # shrink walks that would leave (-0.97, 0.97)
    reach = np.abs(excursion).max(axis=0)
    room = 0.97 - np.abs(start)
    excursion *= np.minimum(1.0, room / np.maximum(reach, 1e-12))
    ramp = delta * np.arange(L + 1)[:, None]
    s = start + np.where(is_planted[None, :], ramp, excursion)

    # a fixed direction orthogonal to u for each video token
    w = rng.standard_normal((m, d))
    w -= np.outer(w @ u, u)
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    norms_v = rng.uniform(0.5, 2.0, size=(L + 1, m, 1))
    video = norms_v * (s[..., None] * u + np.sqrt(1.0 - s**2)[..., None] * w[None, :, :])

    norms_t = rng.uniform(0.5, 2.0, size=(L + 1, n, 1))
    text_dir = np.broadcast_to(u, (L + 1, n, d)).copy()
    if text_spread > 0:
        text_dir += text_spread * rng.standard_normal((L + 1, n, d))
    text = norms_t * text_dir

    frame_map = frame_layout(m, frames)
    band = [b for b in band if b < frames]
    attn = is_planted.astype(float) + attn_noise * rng.standard_normal(m)
    attn += sink_strength * np.isin(frame_map, band)
    return LayerStack(video, text, frame_map), attn
