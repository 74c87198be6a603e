import numpy as np
import pytest

from ivope.core import RunConfig, TargetPolicy, derive_rng_stream
from ivope.envs import ToyTabular, sample_dataset

TOY_PI = TargetPolicy.tabular([0.25, 0.5])


@pytest.fixture(scope="session")
def toy():
    return ToyTabular()


@pytest.fixture(scope="session")
def toy_pi():
    return TOY_PI


@pytest.fixture(scope="session")
def toy_data(toy):
    return sample_dataset(toy, 300, 50, derive_rng_stream(11, "fixture"))


@pytest.fixture(scope="session")
def cfg():
    return RunConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one summary line per acceptance criterion, echoed after the test run
_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
