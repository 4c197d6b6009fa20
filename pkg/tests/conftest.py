import numpy as np
import pytest

from radtriage import autodiff as ad
from radtriage.dataset import synth_generate


def weighted(t: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    """Reduce a tensor to a scalar with fixed weights so every output element matters."""
    return ad.sum(ad.mul(t, w))


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 patients x 2 studies x 2 views at 56 px, seven anatomies cycled."""
    root = tmp_path_factory.mktemp("small_corpus")
    records = synth_generate(12, 2, 2, 56, 0.5, 7, root, cycle_anatomies=True)
    return root, records


_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome; the assertion stays with the caller."""
    def record(name: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
