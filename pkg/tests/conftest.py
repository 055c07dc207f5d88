import numpy as np
import pytest

from metamvs.geometry import Camera, look_at
from metamvs.network import NetConfig, init_params
from metamvs.scene_synth import DatasetConfig, make_dataset


def make_camera(center, target=(0.0, 0.0, 0.0), f=80.0, width=80, height=64):
    K = np.array([[f, 0, (width - 1) / 2], [0, f, (height - 1) / 2], [0, 0, 1]])
    R, t = look_at(center, target)
    return Camera(K, R, t, width, height)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(DatasetConfig(seed=0, scenes_per_domain=2, target_scenes=1))


@pytest.fixture(scope="session")
def net_cfg():
    return NetConfig()


@pytest.fixture(scope="session")
def params0(net_cfg):
    return init_params(net_cfg, 0)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
