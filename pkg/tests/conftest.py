from pathlib import Path

import numpy as np
import pytest

from specpipe import MultimodalPrefix, SeededRng, Vocab, load_scripted_pair, make_synthetic_pair, AlignmentSpec

DATA = Path(__file__).parent / "data"


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def fig6_pair():
    return load_scripted_pair(DATA / "fig6_scripted.json")


@pytest.fixture
def prefix():
    return MultimodalPrefix(tuple(range(100, 116)), (1, 2, 3))


def synthetic(tau, vocab=8, seed=1, sensitivity=0.0):
    return make_synthetic_pair(Vocab(vocab), AlignmentSpec(tau, sensitivity), SeededRng(seed))


def random_dist(gen: np.random.Generator, V: int, zeros: bool = True) -> np.ndarray:
    w = gen.gamma(0.7, size=V)
    if zeros:
        w[gen.random(V) < 0.3] = 0.0
    if w.sum() == 0:
        w[gen.integers(V)] = 1.0
    return w / w.sum()


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
