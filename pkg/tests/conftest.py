import contextlib

import numpy as np
import pytest

from tofc.features import SyntheticSpec, synth_features
from tofc.trainer import TrainConfig, prepare_batch, train

_CRITERIA = []


@contextlib.contextmanager
def criterion(number, title):
    """Record a PASS/FAIL line for an acceptance criterion.

    Yields a list; strings appended to it are printed after the verdict.
    """
    notes = []
    try:
        yield notes
    except BaseException as exc:
        line = f"FAIL criterion {number:2d} | {title} | {type(exc).__name__}: {exc}".splitlines()[0]
        _CRITERIA.append((number, line))
        print(line)
        raise
    line = f"PASS criterion {number:2d} | {title}" + (f" | {'; '.join(notes)}" if notes else "")
    _CRITERIA.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained_bank():
    """A small four-model bank trained briefly on clustered data, with its batch."""
    x = synth_features(SyntheticSpec(cluster_count=4, d_v=8, n_v=32, n_p=16, seed=3))
    cfg = TrainConfig(lam=0.01, alpha=0.01, steps=150, lr=0.01, n_c=4, n_e=4, d_z=2, seed=0)
    bank = train(x, cfg, log_every=50).bank
    return bank, prepare_batch(x, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
