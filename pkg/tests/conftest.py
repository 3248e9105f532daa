import pytest

from phpseg.synth import synth_corpus

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((name, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 tiles per class, 96x96 pixels."""
    return synth_corpus(tmp_path_factory.mktemp("small"), 12, seed=7, size=96)


@pytest.fixture(scope="session")
def bench_corpus(tmp_path_factory):
    """200 tiles per class at 256x256, plus the wall time spent generating them."""
    import time

    t0 = time.perf_counter()
    m = synth_corpus(tmp_path_factory.mktemp("bench"), 200, seed=0, size=256)
    return m, time.perf_counter() - t0
