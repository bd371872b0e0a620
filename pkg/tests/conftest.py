import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class AcceptanceRecorder:
    def record(self, number: int, name: str, ok: bool, detail: str = "") -> None:
        _ACCEPTANCE[number] = (name, bool(ok), detail)
        print(f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceRecorder()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        name, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
