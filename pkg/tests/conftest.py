import pytest

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the end-of-run summary."""

    def record(label, ok, detail, informational=False):
        if ok is None:
            status = "SKIP"
        else:
            status = "PASS" if ok else ("INFO" if informational else "FAIL")
        _ACCEPTANCE[label] = f"criterion {label}: {status}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda s: (int("".join(c for c in s if c.isdigit())), s)
    for label in sorted(_ACCEPTANCE, key=key):
        terminalreporter.write_line(_ACCEPTANCE[label])
