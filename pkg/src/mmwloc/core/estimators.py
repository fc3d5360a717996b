# -*- coding: utf-8 -*-
"""
定位算法管理器
统一管理各种定位算法（神经网络、几何 ADoA 基线）的训练与预测
"""

import logging
from typing import Any, Dict, List, Optional, Type

import numpy as np

from .features import Dataset
from .geoloc import GeoOptions, localize_dataset
from .geometry import Scenario
from .neural_network import Model, TrainConfig, TrainHistory, predict, train
from .tuner import TuningGrid, TuningResult, tune

logger = logging.getLogger(__name__)


class BaseEstimator:
    """定位算法基类"""

    name = ""
    requires_training = False

    def __init__(self, scenario: Scenario, jobs: int = 1):
        self.scenario = scenario
        self.jobs = jobs

    def fit(self, dataset: Dataset):
        """在训练集上拟合（无需训练的算法直接返回）"""
        return self

    def predict(self, dataset: Dataset) -> np.ndarray:
        """返回形状 (n, 2) 的位置估计，顺序与数据集一致"""
        raise NotImplementedError


class NeuralEstimator(BaseEstimator):
    """浅层神经网络回归"""

    name = "nn"
    requires_training = True

    def __init__(self, scenario: Scenario, jobs: int = 1, config: Optional[TrainConfig] = None,
                 grid: Optional[TuningGrid] = None, model: Optional[Model] = None):
        super().__init__(scenario, jobs)
        self.config = config or TrainConfig()
        self.grid = grid
        self.model = model
        self.history: Optional[TrainHistory] = None
        self.tuning: Optional[TuningResult] = None

    def fit(self, dataset: Dataset):
        if self.grid is not None:
            self.tuning = tune(dataset, self.grid, seed=self.config.seed, base_config=self.config,
                               jobs=self.jobs, fingerprint=self.scenario.fingerprint)
            self.model, self.history = self.tuning.model, self.tuning.history
            self.config = self.tuning.best_config
        else:
            self.model, self.history = train(dataset, self.config, self.scenario.fingerprint)
        return self

    def predict(self, dataset: Dataset) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("neural estimator has not been fitted")
        if len(dataset) == 0:
            return np.zeros((0, 2))
        return np.atleast_2d(predict(self.model, dataset.adoa, dataset.mask))


class GeometricEstimator(BaseEstimator):
    """几何 ADoA 基线；无法定位的样本退回房间内部参考点"""

    name = "geo"

    def __init__(self, scenario: Scenario, jobs: int = 1, options: Optional[GeoOptions] = None):
        super().__init__(scenario, jobs)
        self.options = options or GeoOptions()
        self.n_failed = 0

    def predict(self, dataset: Dataset) -> np.ndarray:
        estimates = localize_dataset(dataset, self.scenario.roster, self.scenario.room,
                                     self.options, self.jobs)
        fallback = self.scenario.room.interior_point
        positions = np.array([e.position if e is not None else fallback for e in estimates],
                             dtype=float).reshape(-1, 2)
        self.n_failed = sum(1 for e in estimates if e is None)
        if self.n_failed:
            logger.warning(f"Geometric baseline could not localize {self.n_failed} samples; "
                           f"using the room interior point")
        return positions


class EstimatorManager:
    """定位算法管理器"""

    def __init__(self):
        """初始化管理器"""
        self.handlers: Dict[str, Type[BaseEstimator]] = {}
        self._register_handlers()

    def _register_handlers(self):
        """注册定位算法"""
        for handler in (NeuralEstimator, GeometricEstimator):
            self.register(handler)

    def register(self, handler: Type[BaseEstimator]):
        self.handlers[handler.name] = handler

    def get_supported_algorithms(self) -> List[str]:
        """获取支持的算法名称"""
        return sorted(self.handlers)

    def is_supported(self, name: str) -> bool:
        return name in self.handlers

    def create(self, name: str, scenario: Scenario, **kwargs: Any) -> BaseEstimator:
        """按名称创建算法实例"""
        handler = self.handlers.get(name)
        if handler is None:
            raise ValueError(f"unknown algorithm '{name}' (expected one of "
                             f"{', '.join(self.get_supported_algorithms())})")
        return handler(scenario, **kwargs)


_estimator_manager: Optional[EstimatorManager] = None


def get_estimator_manager() -> EstimatorManager:
    """获取算法管理器单例"""
    global _estimator_manager
    if _estimator_manager is None:
        _estimator_manager = EstimatorManager()
    return _estimator_manager
