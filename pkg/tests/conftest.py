import numpy as np
import pytest

from nfp.synth import default_texture_specs, synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    """4-class, 32x32 textures, 8/4/4 samples per class."""
    return synth_dataset(default_texture_specs(32), (8, 4, 4), master_seed=7)


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(pytestconfig):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = pytestconfig.stash.setdefault(ACCEPTANCE_LINES, [])

    def log(number, passed, detail):
        lines.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return log


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)
