import math

import pytest
import torch

torch.set_num_threads(1)


def random_ball_points(n, d, c, gen, max_frac=0.95):
    """``n`` points in the curvature-``c`` ball with radius fractions uniform in [0, max_frac)."""
    raw = torch.randn(n, d, generator=gen, dtype=torch.float64)
    direction = raw / raw.norm(dim=1, keepdim=True)
    frac = torch.rand(n, 1, generator=gen, dtype=torch.float64) * max_frac
    return direction * frac / math.sqrt(c)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
