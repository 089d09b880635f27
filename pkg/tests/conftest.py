import pytest

import ihr.harness
import ihr.merge
from ihr.linalg import frobenius_norm

ACCEPTANCE_LINES: dict[int, str] = {}
NORM_CONTRACT = {"calls": 0, "layers": 0, "worst": 0.0}

_merge_ihr = ihr.merge.merge_ihr


def _checked_merge_ihr(prev, tuned, factors, cfg, t, check_hash=True):
    out = _merge_ihr(prev, tuned, factors, cfg, t, check_hash=check_hash)
    NORM_CONTRACT["calls"] += 1
    for w0, w1, wm in zip(prev.weights, tuned.weights, out.weights):
        gap = abs(frobenius_norm(wm - w0) - cfg.tau * frobenius_norm(w1 - w0))
        NORM_CONTRACT["layers"] += 1
        NORM_CONTRACT["worst"] = max(NORM_CONTRACT["worst"], gap)
        assert gap <= 1e-10, f"norm contract broken by {gap:.3e} (tau={cfg.tau}, t={t})"
    return out


@pytest.fixture(autouse=True)
def _norm_contract_everywhere(monkeypatch):
    """Every merge_ihr call made by any test is checked against the tau norm contract."""
    monkeypatch.setattr(ihr.merge, "merge_ihr", _checked_merge_ihr)
    monkeypatch.setattr(ihr.harness, "merge_ihr", _checked_merge_ihr)


def record(criterion, ok, detail):
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])

