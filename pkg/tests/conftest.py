import os

import numpy as np
import pytest

from samlab.config import LabSettings
from samlab.utils.data_utils import Dataset, gen_gaussian_task
from samlab.utils.model_utils import build_mlp

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def corpus_path():
    return os.path.join(FIXTURES, "corpus.txt")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_mlp():
    return build_mlp([3, 5, 4, 2], seed=7)


@pytest.fixture
def tiny_batch(rng):
    features = rng.normal(size=(6, 3))
    labels = np.array([0, 1, 1, 0, 1, 0])
    return Dataset("classification", features, labels, 2)


@pytest.fixture
def gaussian_task():
    return gen_gaussian_task(classes=2, dim=4, per_class=40, shift_vector=0.3, seed=3)


@pytest.fixture
def settings(tmp_path):
    return LabSettings(output_dir=str(tmp_path / "runs"), data_dir=str(tmp_path / "data"))


def write_config(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


@pytest.fixture
def small_config(tmp_path):
    """A fast gaussian experiment writing into tmp_path."""
    return write_config(tmp_path / "small.cfg", [
        "model.kind=mlp",
        "model.sizes=4,8,2",
        "data.source=gaussian",
        "data.dim=4",
        "data.per_class=30",
        "optimizer.epochs=2",
        "optimizer.batch_size=16",
        f"output.directory={tmp_path / 'out'}",
        "output.run_id=small",
        "eval.k=5",
        "eval.samples=20",
        "eval.steps=3",
        "eval.seeds=2",
    ])


@pytest.fixture
def lab(settings):
    from samlab import Lab
    from samlab.commands import COMMANDS, build_parser

    app = Lab(settings)
    app.register_commands(COMMANDS, build_parser())
    return app
