import numpy as np
import pytest

from adapter_uda import tensor as T
from adapter_uda.model import ModelConfig


@pytest.fixture(autouse=True)
def _reset_precision():
    prev, dbg = T.get_precision(), T.debug_enabled()
    yield
    T.set_precision(prev)
    T.set_debug(dbg)
    T.get_tape().reset()


@pytest.fixture
def double():
    T.set_precision("double")
    yield
    T.set_precision("single")


@pytest.fixture
def tiny_config():
    return ModelConfig(layers=2, hidden=16, heads=2, ffn_dim=32, adapter_dim=4, vocab_size=40, max_len=12)


def numeric_grad(f, arr, eps=1e-6, index=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (modified in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(arr.shape)


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


# acceptance criteria report one line each; collected here so they show up in the
# terminal summary even when pytest captures stdout
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
