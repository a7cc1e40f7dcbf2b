import numpy as np
import pytest

from telad.data import WindowBatch


def fd_grad(f, arr, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def make_batch(rng, B=4, L=8, H=2, k=3, dyn=(25, 8), stat=(3,), n_real=1):
    return WindowBatch(
        rng.random((B, L, k)),
        rng.random((B, H, k)),
        np.stack([rng.integers(0, c, size=(B, L)) for c in dyn], axis=-1) if dyn else np.zeros((B, L, 0), int),
        np.stack([rng.integers(0, c, size=B) for c in stat], axis=-1) if stat else np.zeros((B, 0), int),
        rng.random((B, n_real)),
        [("ne", i) for i in range(B)],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Print and remember one verdict line for the acceptance summary."""
    verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
    line = f"criterion {number}: {verdict} | {detail}"
    ACCEPTANCE_LINES.append(line)
    import sys

    sys.__stdout__.write("\n" + line + "\n")
    sys.__stdout__.flush()
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
