import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coprop.collection import build_image  # noqa: E402
from coprop.synthetic import SyntheticSpec, generate_synthetic_collection  # noqa: E402


def flat_rgb(h, w, color=(120, 60, 30)):
    return np.broadcast_to(np.array(color, np.uint8), (h, w, 3)).copy()


def make_image(image_id, labels, merges=None, rgb=None, template_mask=None, level=0.5):
    """Image record from a label grid; adjacent pairs default to merge level ``level``."""
    from coprop.collection import adjacent_pairs
    labels = np.asarray(labels, np.int64)
    if merges is None:
        merges = {}
        for a, b in adjacent_pairs(labels).tolist():
            merges[(a, b)] = merges[(b, a)] = level
    if rgb is None:
        rgb = flat_rgb(*labels.shape)
    return build_image(image_id, labels, merges, rgb=rgb, template_mask=template_mask)


@pytest.fixture(scope="session")
def small_collection():
    return generate_synthetic_collection(SyntheticSpec(n_images=5, width=32, height=32), 7)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record a pass/fail line for the acceptance summary, then assert."""
    def check(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
