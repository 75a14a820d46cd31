import os
import sys

import numpy as np
import pytest
from dotenv import find_dotenv, load_dotenv

cwd = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.abspath(f"{cwd}/.."))

from sgt import ResultStore  # noqa: E402   sys.path should be set prior to import
from sgt.channel import sample_instance  # noqa: E402
from sgt.network import SgtConfig, SgtModel  # noqa: E402

load_dotenv(find_dotenv(".env.test"))
os.environ["SQLALCHEMY_DATABASE_URI"] = "sqlite:///:memory:"
os.environ.setdefault("SGT_WORKERS", "1")

# long desk-scale runs, enable with SGT_SLOW_TESTS=1
slow = pytest.mark.skipif(os.environ.get("SGT_SLOW_TESTS") is None, reason="set SGT_SLOW_TESTS to run desk-scale tests")

TINY_TOML = """
[system]
n_t = 2
n_r = 2

[sgt]
d_model = 16
n_layers = 1

[train]
steps = 6
batch_size = 4
checkpoint_every = 3
log_every = 2
seed = 3

[ber]
detectors = ["ml", "lmmse", "oamp", "sgt"]
snr_grid = [0.0, 4.0, 8.0, 12.0]
trials = 20
min_errors = 0
chunk_size = 10
seed = 5
"""


@pytest.fixture
def store():
    store = ResultStore()
    yield store
    store.close()


@pytest.fixture
def tiny_config():
    return SgtConfig(n_t=2, n_r=2, d_model=16, n_layers=1)


@pytest.fixture
def tiny_model(tiny_config):
    return SgtModel(tiny_config)


@pytest.fixture
def instance_2x2():
    return sample_instance(2, 2, 10.0, seed=42)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def tiny_toml(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML + f'\n[output]\ndirectory = "{(tmp_path / "out").as_posix()}"\n')
    return str(path)
