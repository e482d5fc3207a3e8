import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ctmhd.fespace import make_spaces  # noqa: E402
from ctmhd.mesh import mesh_level  # noqa: E402


@pytest.fixture(scope="session")
def mesh1():
    return mesh_level(1)


@pytest.fixture(scope="session")
def mesh2():
    return mesh_level(2)


@pytest.fixture(scope="session")
def spaces1(mesh1):
    return make_spaces(mesh1)


@pytest.fixture(scope="session")
def spaces2(mesh2):
    return make_spaces(mesh2)


@pytest.fixture(scope="session")
def oracle1(mesh1):
    from oracle import Oracle

    return Oracle(mesh1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
