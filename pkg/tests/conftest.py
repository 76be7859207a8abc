import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from unigen import RunConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def tiny_cfg():
    """2+2 layers at width 16 on 8x8 images: 16 tokens per image."""
    return RunConfig(d_model=16, base_layers=2, ctrl_layers=2, experts=3, image_size=8,
                     n_types=4, vocab=24, steps=10, warmup=2, batch_size=4)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
