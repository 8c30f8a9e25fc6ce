import numpy as np
import pytest
import torch

from warpnerf.dataio import Blob, SyntheticSceneConfig, face_template, generate_blob_dataset, random_scene_config
from warpnerf.model import ModelConfig

torch.set_num_threads(1)

TINY = ModelConfig(channels=(4, 4, 8, 8), d_latent=8, mapper_hidden=8, flow_hidden=4, hidden=16,
                   view_layers=1, trunk_layers=1, color_hidden=8, pos_freqs=2, dir_freqs=2)


@pytest.fixture
def single_blob():
    return SyntheticSceneConfig(
        blobs=[Blob(np.zeros(3), np.array([1.0, 0.5, 0.25]), 5.0, 0.3, np.zeros((3, 2)))], E=2)


@pytest.fixture(scope="session")
def small_scene():
    cfg = random_scene_config(1, template=face_template())
    return cfg, generate_blob_dataset(cfg, 6, (32, 32), n_val=1)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY.__dict__)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
