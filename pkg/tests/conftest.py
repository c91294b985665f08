import numpy as np
import pytest

from ppids import model as M
from ppids.rand import Rng
from ppids.ring import FixedPointCodec
from ppids.sharing import share

# lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def codec():
    return FixedPointCodec()


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def desk():
    spec = M.make_desk_spec()
    return spec, M.gen_synthetic_weights(spec, seed=2)


def shared(values, rng, ring):
    return share(np.asarray(values, ring.dtype), rng, ring)
