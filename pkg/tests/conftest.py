import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cascadenl import net  # noqa: E402
from cascadenl.geom import PointCloud  # noqa: E402


def random_cloud(rng, n, extent=2.5, channels=6, num_classes=4):
    pos = rng.uniform(0, extent, size=(n, 3))
    extra = rng.uniform(0, 1, size=(n, channels - 3))
    labels = rng.integers(0, num_classes, size=n)
    return PointCloud(pos, np.concatenate([pos, extra], axis=1), labels, num_classes)


def mini_config(**kw):
    base = dict(stage_M=(16, 8, 4, 2), stage_K=(6, 4, 3, 2), stage_D=(5, 6, 4, 3),
                stage_Dplus=(6, 5, 4, 7), dec_widths=(4, 5, 6, 3), K_sp=3, N_sp_cap=8,
                num_classes=4, in_channels=6)
    base.update(kw)
    return net.NetworkConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
