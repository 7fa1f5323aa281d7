import numpy as np
import pytest

from rchc.config import from_mapping
from rchc.data import gen_shifted_blobs


@pytest.fixture(autouse=True)
def log_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("RCHC_LOG_DIR", str(tmp_path / "logs"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """A blob run small enough for unit tests."""
    return from_mapping({
        "dataset": "blobs",
        "num_classes": 3,
        "n_source": 120,
        "n_target": 120,
        "epochs": 2,
        "source_epochs": 4,
        "batch_size": 32,
        "hidden_width": 16,
        "embedding_dim": 8,
        "shift_rotation_deg": 25.0,
        "seeds": (2019,),
    })


@pytest.fixture
def small_blobs(small_config):
    c = small_config
    return gen_shifted_blobs(
        c.data_seed, c.num_classes, c.n_source, c.n_target,
        translation=c.shift_translation, rotation_deg=c.shift_rotation_deg,
    )
