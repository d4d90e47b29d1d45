import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def paint(shape, *objects):
    """Instance map with each object given as a list of (row, col) pixels."""
    out = np.zeros(shape, dtype=np.uint32)
    for label, pixels in enumerate(objects, start=1):
        for r, c in pixels:
            out[r, c] = label
    return out


def disk_pixels(cr, cc, r):
    return [(cr + dy, cc + dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dy * dy + dx * dx <= r * r]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
