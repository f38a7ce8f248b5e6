import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from arbkp.datamodel import PartMask, PoseAnnotation  # noqa: E402
from arbkp.synthgen import FigureConfig, generate_figure  # noqa: E402

torch.set_num_threads(1)


def rectangle_case():
    """40 x 20 limb rectangle, x in [10, 50], y in [14, 34], on a 64 x 48 raster."""
    raster = np.zeros((48, 64), dtype=bool)
    raster[14:34, 10:50] = True
    xy = np.zeros((17, 2))
    vis = np.zeros(17, dtype=bool)
    # left upper arm: shoulder (slot 1) -> elbow (slot 3)
    xy[1], xy[3] = (10, 24), (50, 24)
    vis[[1, 3]] = True
    # torso joints, for a defined torso size
    xy[2], xy[7] = (0, 0), (30, 40)
    vis[[2, 7]] = True
    xy[0] = (5, 5)
    vis[0] = True
    ann = PoseAnnotation.from_arrays("rect", xy, vis)
    return ann, {"l_upper_arm": PartMask("l_upper_arm", raster)}


@pytest.fixture
def rect():
    return rectangle_case()


@pytest.fixture(scope="session")
def figures():
    out = []
    seed = 0
    while len(out) < 6:
        try:
            out.append(generate_figure(FigureConfig(seed=seed, image_id=f"f{seed}")))
        except ValueError:
            pass
        seed += 1
    return out


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    from arbkp.dataset import write_synthetic_dataset

    d = tmp_path_factory.mktemp("synth")
    write_synthetic_dataset(d, 6, seed=3, mask_fraction=0.7)
    return d


ACCEPTANCE_LINES = []


def acceptance_line(number, passed, detail):
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
