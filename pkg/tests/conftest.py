import contextlib
import time

import pytest
import torch

torch.set_num_threads(1)

_CRITERIA: list[tuple[int, str, bool, str]] = []


class _Record:
    def __init__(self):
        self.detail = ""
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start


@pytest.fixture
def criterion():
    """``with criterion(n, title) as rec:`` records one PASS/FAIL line for the acceptance summary."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        rec = _Record()
        try:
            yield rec
        except BaseException as exc:
            detail = rec.detail or f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            _CRITERIA.append((number, title, False, detail))
            print(f"criterion {number} FAIL  {title}  ({detail})")
            raise
        _CRITERIA.append((number, title, True, rec.detail))
        print(f"criterion {number} PASS  {title}  ({rec.detail})")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
