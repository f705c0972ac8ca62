import sys

import numpy as np
import pytest

from nmnet import synth
from nmnet.geom import Correspondence


def corr(kp, a, kp2, a2):
    return Correspondence.make(kp, np.asarray(a, float), kp2, np.asarray(a2, float))


I2 = np.eye(2)


@pytest.fixture
def ci():
    return corr((0, 0), I2, (1, 1), 2 * I2)


@pytest.fixture
def cj_consistent():
    return corr((1, 0), I2, (3, 1), 2 * I2)


@pytest.fixture
def cj_shift():
    return corr((1, 0), I2, (0, 0), I2)


@pytest.fixture(scope="session")
def noiseless_scene():
    cfg = synth.GeneratorConfig(n_correspondences=200, inlier_ratio=0.6, keypoint_noise_sigma=0.0, frame_noise_sigma=0.0, seed=11)
    return synth.generate(cfg)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results):
        terminalreporter.write_line(results[name])
