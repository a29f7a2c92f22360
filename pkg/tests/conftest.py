import numpy as np
import pytest
import yaml

from core.helpers.config import build_filter_config
from core.helpers.measurement_process import ForwardProcess, MeasurementOperator
from core.helpers.schedule import Schedule
from core.services.verification import random_spd


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def cosine() -> Schedule:
    return Schedule("cosine")


@pytest.fixture
def identity_fp(cosine) -> ForwardProcess:
    return ForwardProcess(MeasurementOperator("identity", 3, 1.0), cosine)


@pytest.fixture
def mask_fp(cosine) -> ForwardProcess:
    return ForwardProcess(MeasurementOperator("grid_mask", 2, 0.5, mask=(True, False)), cosine)


@pytest.fixture
def dense_fp(cosine) -> ForwardProcess:
    matrix = random_spd(3, np.random.default_rng(7), 0.05, 1.0)
    return ForwardProcess(MeasurementOperator("dense", 3, 1.0, matrix=matrix), cosine)


@pytest.fixture
def tiny_raw() -> dict:
    """A Lorenz-63 config small enough to run both methods in seconds."""
    return {
        "filter": {"n_members": 8, "n_steps": 12, "gap": 4, "eval_window": [4, 12]},
        "score_net": {"hidden_width": 8, "depth": 2, "time_embed_dim": 4},
        "training": {"epochs": 3, "batch_size": 4, "finetune_epochs": 2},
        "sampler": {"nfe": 10},
        "experiment": {"seeds": [0, 1], "methods": ["masf", "enkf"]},
    }


@pytest.fixture
def tiny_cfg(tiny_raw):
    return build_filter_config(tiny_raw)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_raw) -> str:
    raw = dict(tiny_raw)
    raw["experiment"] = {**tiny_raw["experiment"], "output_dir": str(tmp_path / "runs")}
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(raw))
    return str(path)
