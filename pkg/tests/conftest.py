import numpy as np
import pytest


def finite_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (independent gradient oracle)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ------------------------------------------------------------------
# Tests marked ``criterion(n)`` feed a one-line-per-criterion summary printed at
# the end of the session. A criterion passes only if all of its tests pass.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]
    if rep.failed:
        entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(dict.fromkeys(e["details"]))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}  {detail}")
