import numpy as np
import pytest
import torch

from posegan.data import load_manifest
from posegan.networks import ArchConfig
from posegan.pose_space import make_vocabulary
from posegan.turntable import RenderConfig, generate_dataset

torch.set_num_threads(1)

TINY_ARCH = ArchConfig(image_size=32, n_discrete=6, base_width=4, n_res_elim=1, n_res_add=1)


@pytest.fixture(scope="session")
def vocab6():
    return make_vocabulary(6, 1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, vocab6):
    """2 classes x 2 instances x 6 yaw poses at 32 px."""
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(root, 2, 2, vocab6, RenderConfig.for_vocabulary(vocab6, image_size=32), seed=0)
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset):
    return load_manifest(tiny_dataset / "all.jsonl")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_manifest):
    from posegan.trainer import TrainConfig, fit
    return fit(TrainConfig(total_epochs=2, batch_size=8, n_critic=1, arch=TINY_ARCH, seed=0), tiny_manifest)


@pytest.fixture(scope="session")
def tiny_ckpt_dir(tmp_path_factory, tiny_ckpt):
    from posegan.trainer import save_checkpoint
    path = tmp_path_factory.mktemp("ckpt") / "checkpoint"
    save_checkpoint(path, tiny_ckpt)
    return path


# one line per acceptance criterion, echoed again at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
