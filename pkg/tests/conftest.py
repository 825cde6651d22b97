import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coopir.core import Prng  # noqa: E402
from coopir.degrade import gen_clean  # noqa: E402


@pytest.fixture
def texture():
    return gen_clean("value_noise_texture", 64, Prng(3))


@pytest.fixture
def rng():
    return Prng(12345)


def random_image(seed, h=16, w=16, c=3):
    return Prng(seed).random(h * w * c).reshape(h, w, c)


@pytest.fixture
def rand_img():
    return random_image


np.seterr(all="raise", under="ignore")


# Acceptance results are gathered here and printed after the run, one line per criterion.
ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
