import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from surfchart.netcore import NetConfig  # noqa: E402
from surfchart.synthcam import build_dataset, load_dataset  # noqa: E402


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    build_dataset(3, 3, (32, 32), seed=7, out_dir=root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


def small_net(**kw):
    base = dict(resolution=(32, 32), latent_dim=128, amp_dims=(8, 16, 32), sp_width=256,
                sp_depth=5, channel_scale=0.125, n_pool=3)
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture
def net_small():
    return small_net()


_CRITERIA = {}


def record_criterion(number, ok, detail):
    """Keep one PASS/FAIL line per acceptance criterion for the terminal summary."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
