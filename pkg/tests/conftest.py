import re
import zlib

import numpy as np
import pytest

from bkfac.linalg import LowRankSPSD

ACCEPTANCE = {}


def random_rep(rng, d, r, scale=1.0):
    U, _ = np.linalg.qr(rng.standard_normal((d, r)))
    D = np.sort(rng.random(r) * scale + 1e-3)[::-1]
    return LowRankSPSD(U, D)


def random_spd(rng, d, rank=None):
    X = rng.standard_normal((d, rank or d))
    return X @ X.T


@pytest.fixture
def rng(request):
    # stable per-test seed so failures reproduce
    return np.random.default_rng(zlib.crc32(request.node.name.encode()))


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""

    def record(criterion, passed, detail, soft=False):
        ACCEPTANCE[criterion] = (passed, detail, soft)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        passed, detail, soft = ACCEPTANCE[key]
        status = "PASS" if passed else ("WARN" if soft else "FAIL")
        terminalreporter.write_line(f"criterion {key}: {status} {detail}")
