import os
import tempfile

import numpy as np
import pytest
import torch

from bevworld.config import RunConfig
from bevworld.dataset_io import build_dataset

torch.set_num_threads(1)

# Small-everything overrides so model-level tests run in seconds.
TINY = [
    "bev.w=16", "bev.c=8",
    "cam.count=2", "cam.width=16", "cam.height=10",
    "lidar.rows=8", "lidar.cols=32",
    "llm.dim=32", "llm.layers=1", "llm.heads=2",
    "link.n_blocks=2", "link.mod_hidden=16",
    "vol.z=4", "vol.cprime=4", "render.levels_per_cell=4",
    "render.samples=12",
    "extractor.width=8",
    "train.rays_per_frame=32", "train.batch=2", "train.lang_batch=4",
    "train.stage1a_steps=2", "train.stage1b_steps=2",
    "train.stage2a_epochs=1", "train.stage2b_epochs=1", "train.stage2c_epochs=1",
    "train.stage3_epochs=1",
    "eval.max_frames=2",
]


def make_tiny_config(*extra: str) -> RunConfig:
    cfg = RunConfig()
    cfg.apply_overrides(TINY + list(extra))
    return cfg


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return make_tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    return build_dataset(make_tiny_config(), seed=3, n_sequences=8)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


# Verdict lines from the verification battery travel through a scratch file
# (pytest's fd-level capture swallows prints, and the conftest plugin module
# is a different instance from the importable tests.conftest).
VERDICT_FILE_VAR = "BEVWORLD_VERDICT_FILE"


def register_verdict(line: str) -> None:
    path = os.environ.get(VERDICT_FILE_VAR)
    if path:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def pytest_configure(config):
    fd, path = tempfile.mkstemp(prefix="verdicts-", suffix=".txt")
    os.close(fd)
    os.environ[VERDICT_FILE_VAR] = path


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    path = os.environ.get(VERDICT_FILE_VAR)
    if not path or not os.path.exists(path):
        return
    with open(path, encoding="utf-8") as fh:
        lines = sorted(set(fh.read().splitlines()))
    os.unlink(path)
    if lines:
        terminalreporter.section("verification battery")
        for line in lines:
            terminalreporter.write_line(line)
