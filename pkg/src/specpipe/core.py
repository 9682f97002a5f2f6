"""Vocabulary, probability and randomness primitives shared by every module."""

from __future__ import annotations

import zlib
from bisect import bisect_right
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

PROB_ATOL = 1e-12

TokenSequence = tuple  # tuple[int, ...]; kept as a plain tuple so it hashes cheaply


class AllZero(ValueError):
    """Raised when asked to normalize a vector with no positive mass."""


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise ValueError(f"vocab size must be an integer >= 2, got {self.size!r}")

    def check(self, ids: Iterable[int]) -> TokenSequence:
        ids = tuple(int(i) for i in ids)
        for i in ids:
            if not 0 <= i < self.size:
                raise ValueError(f"token id {i} outside vocab of size {self.size}")
        return ids


class Distribution:
    """Immutable categorical distribution over token ids ``0..len-1``."""

    __slots__ = ("probs", "_cdf")

    def __init__(self, probs):
        arr = np.array(probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError("a distribution needs a 1-d vector over at least 2 ids")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(arr.sum() - 1.0) > PROB_ATOL:
            raise ValueError(f"probabilities sum to {arr.sum()!r}, not 1")
        arr.setflags(write=False)
        self.probs = arr
        self._cdf = None

    @classmethod
    def trusted(cls, arr: np.ndarray) -> "Distribution":
        # Hot-path constructor for arrays the caller already normalized.
        d = object.__new__(cls)
        arr.setflags(write=False)
        d.probs = arr
        d._cdf = None
        return d

    @classmethod
    def point_mass(cls, token: int, size: int) -> "Distribution":
        arr = np.zeros(size)
        arr[token] = 1.0
        return cls.trusted(arr)

    @classmethod
    def uniform(cls, size: int) -> "Distribution":
        return cls.trusted(np.full(size, 1.0 / size))

    @property
    def cdf(self) -> list:
        if self._cdf is None:
            self._cdf = np.cumsum(self.probs).tolist()
        return self._cdf

    def __len__(self):
        return self.probs.size

    def __getitem__(self, token):
        return float(self.probs[token])

    def __eq__(self, other):
        return isinstance(other, Distribution) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())

    def __repr__(self):
        return f"Distribution({np.array2string(self.probs, precision=4)})"


def normalize(raw) -> Distribution:
    """Rescale a non-negative vector so it sums to one."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError("need a 1-d vector over a vocab of at least 2 ids")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError("entries must be finite and non-negative")
    total = arr.sum()
    if total <= 0:
        raise AllZero("cannot normalize a vector with no positive entry")
    return Distribution.trusted(arr / total)


def total_variation(a: Distribution, b: Distribution) -> float:
    if len(a) != len(b):
        raise ValueError("distributions live on different vocabularies")
    return 0.5 * float(np.abs(a.probs - b.probs).sum())


def _name_key(name) -> int:
    if isinstance(name, str):
        return zlib.crc32(name.encode())
    return int(name)


class SeededRng:
    """Counter-based (Philox) random stream with named, independent children.

    ``rng.stream("draft", 3)`` always yields the same child for the same root
    seed, regardless of how many draws were taken from the parent. This keeps
    the draft and target streams decoupled when workers run in a different
    order.
    """

    _BLOCK = 64

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed) % 2**64
        self.path = tuple(path)
        self._gen = None  # built on first draw; many streams are never used
        self._buf: list = []

    def stream(self, name, *index: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + (_name_key(name),) + tuple(int(i) for i in index))

    def random(self) -> float:
        if not self._buf:
            if self._gen is None:
                seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
                self._gen = np.random.Generator(np.random.Philox(seq))
            self._buf = self._gen.random(self._BLOCK).tolist()
            self._buf.reverse()
        return self._buf.pop()

    def generator(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream (for bulk array draws)."""
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=self.path + (0xA11A,))))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path})"


def sample(d: Distribution, rng: SeededRng) -> int:
    """Inverse-CDF draw of one token id; consumes exactly one uniform."""
    return sample_with(d, rng.random())


def sample_with(d: Distribution, u: float) -> int:
    cdf = d.cdf
    i = bisect_right(cdf, u)
    if i >= len(cdf):
        # float round-off left the last cdf entry a hair under u
        i = int(np.flatnonzero(d.probs)[-1])
    return i


@dataclass
class TimingLedger:
    """Counts forward passes and charges their cost in milliseconds."""

    t_draft: float = 1.0
    t_target: float = 1.0
    draft_forwards: int = 0
    target_forwards: int = 0
    verifications: int = 0
    elapsed_ms: float = 0.0

    def draft_forward(self, n: int = 1):
        self.draft_forwards += n
        self.elapsed_ms += n * self.t_draft

    def target_forward(self, n: int = 1):
        self.target_forwards += n
        self.elapsed_ms += n * self.t_target

    def verification(self):
        # one batched target pass, whatever the window length
        self.verifications += 1
        self.target_forwards += 1
        self.elapsed_ms += self.t_target


@dataclass
class RunStats:
    """Summary of one generation run.

    ``M`` is the mean accepted length. For sequential speculative decoding it
    is tokens emitted per draft-then-verify round; for the parallel pipeline it
    is the mean adaptive draft length (tokens emitted between rollbacks).
    """

    K: int
    M: float
    acceptance_rate: float
    per_token_ms: float
    speedup_vs_autoregressive: float
    total_latency_ms: float
    tokens_per_second: float
    rollback_count: int = 0
    rounds: int = 0
    accepted_per_round: float = 0.0
    max_adaptive_length: int = 0
    prefill_ms: float = 0.0
    semantics: str = "truncating"
    backend: str = "simulated"

    def to_dict(self) -> dict:
        return asdict(self)
