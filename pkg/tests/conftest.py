import pytest

from diffgf.config import tiny_config
from diffgf.dataset import build_dataset


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config(0)


@pytest.fixture(scope="session")
def tiny_triples(tiny_cfg):
    """Eight 32x32 triples from two small scenes."""
    return build_dataset(tiny_cfg.dataset, tiny_cfg.seed)


_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """``record(key, ok, detail)`` stores one PASS/FAIL line for the terminal summary."""

    def record(key: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[key] = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[key])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(_ACCEPTANCE[key])
