import numpy as np
import pytest

from crossreid import data
from crossreid.encoders import EncoderConfig

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def record():
    """Log one PASS/FAIL line per acceptance criterion; shown in the terminal summary and on stdout."""

    def _record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _record


# small enough that a training epoch takes a few milliseconds
SMALL = EncoderConfig(d=8, resolution=16, channels=(4, 6), kernels=(3, 3), strides=(1, 1), pools=(2, 2))


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """Six identities, three frames each, 16x16, on disk."""
    root = tmp_path_factory.mktemp("small_ds")
    data.emit(data.synth_generate(6, 3, resolution=16, noise=0.1, seed=5), root)
    return root


@pytest.fixture(scope="session")
def small_index(small_root):
    return data.ingest(small_root)


@pytest.fixture(scope="session")
def small_split(small_index):
    return data.make_splits(small_index, 1, seed=0)[0]


@pytest.fixture()
def small_store(small_index, small_split):
    return data.SampleStore(small_index, small_split, 16, np.float32)


@pytest.fixture(scope="session")
def synth8_root(tmp_path_factory):
    """The k=8, T=6, 32x32 synthetic benchmark."""
    root = tmp_path_factory.mktemp("synth8")
    data.emit(data.synth_generate(8, 6, resolution=32, noise=0.1, seed=0), root)
    return root
