import numpy as np
import pytest
import torch

from fewmax import fixtures

torch.set_num_threads(1)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def shapes_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    return fixtures.write_shapes_fixture(root, source_per_class=8, target_per_class=4, probe_per_class=4, test_per_class=4)


@pytest.fixture(scope="session")
def phantom_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantom")
    return fixtures.write_phantom_fixture(root, patch_size=16, source_slices=4, target_slices=3, test_slices=3)


# acceptance summary lines, printed regardless of capture settings
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
