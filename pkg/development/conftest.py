# pytest 公共 fixture
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from data_pipeline import Dataset, build_dataset  # noqa: E402
from development.dev_config import DevTools, dev_config  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(dev_config.TEST_SEED)


@pytest.fixture
def flat_field():
    return DevTools.flat_field()


@pytest.fixture
def tiny_config():
    return DevTools.tiny_run_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """7 个 episode（每类地形一个）的小数据集，整个会话共用"""
    root = tmp_path_factory.mktemp("dataset")
    build_dataset(DevTools.tiny_run_config(), root, jobs=2)
    return Dataset(root)
