from __future__ import annotations

import pytest
import torch

from zsad.data import ManifestDataset, Preprocessor, generate_synthetic_dataset
from zsad.encoder import MockBackbone, mock_config

# (status, criterion, detail) lines filled in by test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for status, name, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status:<4}  {name}: {detail}")


@pytest.fixture(scope="session")
def mock_cfg():
    return mock_config()


@pytest.fixture(scope="session")
def encoder(mock_cfg):
    return MockBackbone(mock_cfg)


@pytest.fixture(scope="session")
def preprocessor(mock_cfg):
    return Preprocessor.from_config(mock_cfg)


@pytest.fixture(scope="session")
def synthetic_pair(tmp_path_factory):
    """80-image training set and 40-image held-out set at 128 x 128."""
    root = tmp_path_factory.mktemp("synthetic")
    train = generate_synthetic_dataset(root / "train", 40, 40, 128, seed=1, name="synthetic-train")
    test = generate_synthetic_dataset(root / "test", 20, 20, 128, seed=2, name="synthetic-test")
    return train, test


@pytest.fixture(scope="session")
def train_dataset(synthetic_pair, preprocessor):
    return ManifestDataset(synthetic_pair[0], preprocessor)


@pytest.fixture
def random_images(mock_cfg):
    g = torch.Generator().manual_seed(7)
    r = mock_cfg.input_resolution
    return torch.rand(10, 3, r, r, generator=g)
