import numpy as np
import pytest

from isoinr.volume import LabelVolume, Volume

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


def random_rotation_direction(rng):
    """Random signed permutation matrix (the direction matrices NIfTI sforms carry)."""
    perm = rng.permutation(3)
    signs = rng.choice([-1.0, 1.0], size=3)
    d = np.zeros((3, 3))
    d[np.arange(3), perm] = signs
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_volume(rng):
    data = rng.normal(size=(5, 4, 3)).astype(np.float32)
    return Volume(data, (0.5, 0.7, 1.3), (1.0, -2.0, 3.5), random_rotation_direction(rng))


@pytest.fixture
def small_labels(rng):
    data = rng.integers(0, 4, size=(6, 5, 4))
    return LabelVolume(data, (0.4, 0.4, 2.6), (0.0, 0.0, 0.0), np.eye(3), ((0, "background"), (1, "a"), (2, "b"), (3, "c")))
