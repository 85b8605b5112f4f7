import os
import tempfile

import numpy as np
import pytest

# Configure settings before the package is imported
_TMP = tempfile.mkdtemp(prefix="cpft-tests-")
os.environ.setdefault("CPFT_DATABASE_URL", f"sqlite:///{_TMP}/test_cpft_runs.db")
os.environ.setdefault("CPFT_OUTPUT_DIR", os.path.join(_TMP, "runs"))

from cpft.config import TrainConfig  # noqa: E402
from cpft.core import InteractionSequence  # noqa: E402
from cpft.data import Dataset, SynthSpec, generate_synthetic  # noqa: E402
from cpft.db import init_db  # noqa: E402
from cpft.model import init_params  # noqa: E402


@pytest.fixture(scope="session", autouse=True)
def setup_db():
    init_db()
    yield


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def tiny_dataset():
    """Four users over a catalog of eight items."""
    rows = [
        (0, (0, 1, 2, 3, 4)),
        (1, (2, 3, 4, 5)),
        (2, (5, 6, 7, 0, 1, 2)),
        (3, (7, 0, 1)),
    ]
    return Dataset(sequences=tuple(InteractionSequence(user=u, items=i) for u, i in rows), catalog_size=8)


@pytest.fixture()
def small_synthetic():
    return generate_synthetic(SynthSpec(n_users=60, n_items=12, min_len=5, max_len=9, seed=3))


@pytest.fixture()
def gru_params():
    return init_params(catalog_size=8, d=4, encoder="gru", seed=5, scale=0.5)


@pytest.fixture()
def fast_config():
    return TrainConfig(
        d=8, batch_size=16, epochs=3, pretrain_epochs=3, early_stopping_patience=0,
        learning_rate=1e-2, pretrain_learning_rate=1e-2, tau=0.1, seed=0,
    )
