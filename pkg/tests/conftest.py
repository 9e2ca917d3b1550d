import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def central_diff(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``f`` at float64 tensor ``x``."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(f(x))
        flat[i] = old - eps
        lo = float(f(x))
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def autograd_grad(f, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def rel_err(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance verdicts ---------------------------------------------------------
# Tests marked ``criterion(n)`` roll up into one PASS/FAIL line per criterion.

_verdicts: dict[int, list] = {}
_notes: dict[int, list] = {}


def note(criterion: int, text: str) -> None:
    """Attach a measured value to a criterion's summary line."""
    _notes.setdefault(criterion, []).append(text)


def pytest_runtest_logreport(report):
    n = getattr(report, "criterion", None)
    if n is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _verdicts.setdefault(n, []).append((report.nodeid.split("::")[-1], report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_verdicts):
        results = _verdicts[n]
        bad = [name for name, o in results if o != "passed"]
        if any(o == "failed" for _, o in results):
            status = "FAIL"
        elif bad:
            status = "SKIP"
        else:
            status = "PASS"
        detail = f"{len(results) - len(bad)}/{len(results)} checks passed"
        if bad:
            detail += "; not passed: " + ", ".join(bad)
        tr.write_line(f"criterion {n}: {status} ({detail})")
        for text in _notes.get(n, []):
            tr.write_line(f"    {text}")
