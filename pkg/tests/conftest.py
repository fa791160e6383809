import numpy as np
import pytest

from openclinical.domain import DiagnosisLabel, ExamKind, Label, VisitRecord


def make_visit(kinds, width=8, label="AD", seed=0, subject="S0", index=0, subtype=None):
    """Visit with random rows for ``kinds`` (names or ExamKind)."""
    rng = np.random.default_rng(seed)
    rows = {ExamKind[k] if isinstance(k, str) else k: rng.standard_normal(width) for k in kinds}
    return VisitRecord(subject, index, DiagnosisLabel(Label(label), subtype), rows)


@pytest.fixture
def visit_factory():
    return make_visit


def max_fd_rel_error(loss_fn, params, grads, h=1e-5, floor=1e-6):
    """Largest relative gap between analytic ``grads`` and central differences of ``loss_fn``.

    The gap is ``|a - n| / max(|a|, |n|, floor)`` so that entries whose true
    value is zero are compared on an absolute scale.
    """
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.shape[0]):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(params)
            flat[i] = old - h
            down = loss_fn(params)
            flat[i] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(g[i] - num) / max(abs(g[i]), abs(num), floor))
    return worst


# --------------------------------------------------------------------------
# acceptance reporting: one line per criterion in the terminal summary
# --------------------------------------------------------------------------

_CRITERIA: dict = {}


@pytest.fixture
def measured(request):
    """Dict a criterion test fills with the numbers it measured."""
    request.node.measured = {}
    return request.node.measured


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    details = ", ".join(f"{k}={v}" for k, v in getattr(item, "measured", {}).items())
    _CRITERIA[number] = (title, rep.passed, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{details}]" if details else ""))
