# -*- coding: utf-8 -*-
"""测试公共设置：src 加入路径、慢速测试开关、场景夹具"""

import os
import sys

import numpy as np
import pytest

# 与 main.py 相同的路径设置
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

from mmwloc.core.geometry import Room, Scenario, load_scenario  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="运行全规模的统计测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 全规模的统计测试，需要 --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def rect3() -> Scenario:
    return load_scenario("rect3")


@pytest.fixture(scope="session")
def rect4() -> Scenario:
    return load_scenario("rect4")


@pytest.fixture(scope="session")
def lroom3() -> Scenario:
    return load_scenario("lroom3")


@pytest.fixture
def square_room() -> Room:
    return Room([[0, 0], [10, 0], [10, 10], [0, 10]])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
