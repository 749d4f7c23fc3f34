import sys
from pathlib import Path

import pytest
import torch
from torch import nn

sys.path.insert(0, str(Path(__file__).parent))

from safecf.greybox import GreyBoxClassifier, GlobalAvgPool  # noqa: E402

# Filled by test_acceptance.py, printed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_greybox(size=8, channels=(4, 6), num_classes=2, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    stages = []
    in_ch = 3
    for i, ch in enumerate(channels, start=1):
        stages.append((f"stage{i}", nn.Sequential(nn.Conv2d(in_ch, ch, 3, 1, 1), nn.Tanh())))
        in_ch = ch
    stages += [("pool", GlobalAvgPool()), ("head", nn.Linear(in_ch, num_classes))]
    return GreyBoxClassifier(stages, num_classes, (size, size, 3), capture_layer=f"stage{len(channels)}").to(dtype)


@pytest.fixture
def small_greybox():
    return tiny_greybox()
