import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tierkv import _kernels  # noqa: E402
from tierkv.config import ShadowConfig  # noqa: E402


@pytest.fixture(params=sorted(_kernels.BACKENDS))
def backend(request):
    """Run a test once per available kernel backend."""
    with _kernels.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_cfg(**kw):
    base = dict(rank=32, chunk_size=8, outliers=2, budget=4, local_window=4, num_q_heads=4, num_kv_heads=2, head_dim=16)
    base.update(kw)
    return ShadowConfig(**base)


@pytest.fixture
def cfg():
    return small_cfg()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
