import numpy as np
import pytest

from bvit.vit import ModelConfig

_CRITERIA: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    # 16x16 RGB, 8px patches -> N=4 tokens + class token
    return ModelConfig(image_hw=(16, 16), channels=3, patch=8, dim=16, depth=2, heads=2, mlp_ratio=4,
                       num_classes=3, gamma=1.0, variant="broad_full")


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""
    def record(name: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
        _CRITERIA.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
