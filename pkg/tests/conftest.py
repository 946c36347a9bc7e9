import io
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flexlora import cli  # noqa: E402

_CRITERIA: dict[int, str] = {}
_SWEEP_SECONDS: dict[str, float] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    _CRITERIA[number] = line
    print(line)


def _run_sweep(preset: str, out: Path, key: str) -> Path:
    start = time.perf_counter()
    code = cli.main(["sweep", preset, "--out", str(out)], stdout=io.StringIO())
    _SWEEP_SECONDS[key] = time.perf_counter() - start
    assert code == 0, f"sweep {preset} exited {code}"
    return out


@pytest.fixture(scope="session")
def sweep_dir(tmp_path_factory):
    cache: dict[str, Path] = {}

    def get(preset: str, copy: int = 0) -> Path:
        key = f"{preset}#{copy}"
        if key not in cache:
            cache[key] = _run_sweep(preset, tmp_path_factory.mktemp(f"{preset}_{copy}"), key)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def sweep_seconds():
    return _SWEEP_SECONDS


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
    if _SWEEP_SECONDS:
        parts = ", ".join(f"{k} {v:.1f}s" for k, v in sorted(_SWEEP_SECONDS.items()))
        terminalreporter.write_line(f"sweep timings: {parts}")
