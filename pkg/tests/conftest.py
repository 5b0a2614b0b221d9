import pytest

CRITERIA = range(1, 14)

# criterion number -> list of (part, ok, detail)
_results: dict[int, list] = {}


class Recorder:
    def __call__(self, number: int, part: str, ok: bool, detail: str = "") -> bool:
        _results.setdefault(number, []).append((part, bool(ok), detail))
        return bool(ok)


@pytest.fixture(scope="session")
def record():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in CRITERIA:
        parts = _results.get(n)
        if not parts:
            tr.write_line(f"criterion {n:2d}: FAIL (not run)")
            continue
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p}{'' if ok else ' [fail]'}: {d}" if d else p for p, ok, d in parts)
        tr.write_line(f"criterion {n:2d}: {verdict}  {detail}")
