import os

import pytest

from follmer_lab import harness

# criterion number -> list of (part, passed, detail), filled by test_acceptance
CRITERIA = {}


def record(criterion: int, part: str, passed: bool, detail: str):
    CRITERIA.setdefault(criterion, []).append((part, bool(passed), detail))
    line = f"criterion {criterion:>2} [{part}]: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        parts = CRITERIA[k]
        ok = all(p for _, p, _ in parts)
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}")
        for part, p, detail in parts:
            terminalreporter.write_line(f"    {'pass' if p else 'FAIL'}  {part}: {detail}")


@pytest.fixture(autouse=True)
def _no_worker_env(monkeypatch):
    monkeypatch.delenv("FOLLMER_LAB_WORKERS", raising=False)


@pytest.fixture(scope="session")
def q_ensemble_1e5():
    """The default Q ensemble (10^5 paths, dt = 1e-4, t in {0.25, 1, 4}) and its wall time.

    Built through the harness so the acceptance experiments reuse it.
    """
    import time

    env = os.environ.pop("FOLLMER_LAB_WORKERS", None)
    try:
        cfg = harness.make_config("survival-q", {"output_path": os.devnull})
        t0 = time.perf_counter()
        ens = harness.q_ensemble(cfg, cfg.times())
        return ens, time.perf_counter() - t0
    finally:
        if env is not None:
            os.environ["FOLLMER_LAB_WORKERS"] = env
