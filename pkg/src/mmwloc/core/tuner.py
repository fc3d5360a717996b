# -*- coding: utf-8 -*-
"""
超参数网格搜索
对节点系数 k、dropout 比例 p、学习率 r 做穷举搜索，按验证集 MSE 选优
"""

import itertools
import logging
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

from .error_manager import TrainingError
from .features import Dataset
from .neural_network import (Model, TrainConfig, TrainHistory, count_parameters,
                             layer_sizes, train)
from .task_manager import run_tasks

logger = logging.getLogger(__name__)

DEFAULT_NODE_FACTORS = (0.6, 0.7, 0.8)
DEFAULT_DROPOUTS = (0.0, 0.05, 0.10)


def learning_rate_ladder(start_exp: int = -4, stop_exp: int = -2, per_decade: int = 10) -> Tuple[float, ...]:
    """对数学习率梯子：每十倍 per_decade 个值，两端都包含"""
    n = (stop_exp - start_exp) * per_decade
    return tuple(10.0 ** (start_exp + i / per_decade) for i in range(n + 1))


@dataclass(frozen=True)
class TuningGrid:
    """搜索网格"""
    node_factors: Tuple[float, ...] = DEFAULT_NODE_FACTORS
    dropouts: Tuple[float, ...] = DEFAULT_DROPOUTS
    learning_rates: Tuple[float, ...] = field(default_factory=learning_rate_ladder)

    def __post_init__(self):
        if not (self.node_factors and self.dropouts and self.learning_rates):
            raise ValueError("tuning grid must not be empty")

    @classmethod
    def full(cls) -> "TuningGrid":
        """完整网格：3 x 3 x 21 = 189 组"""
        return cls()

    @classmethod
    def compact(cls) -> "TuningGrid":
        """已报告最优值附近的小网格"""
        return cls(node_factors=(0.7,), dropouts=(0.0, 0.05),
                   learning_rates=(0.0004, 0.002, 0.006))

    @classmethod
    def single(cls, config: TrainConfig) -> "TuningGrid":
        return cls((config.node_factor,), (config.dropout,), (config.learning_rate,))

    @classmethod
    def preset(cls, name: str) -> "TuningGrid":
        presets = {"full": cls.full, "compact": cls.compact}
        if name not in presets:
            raise ValueError(f"unknown tuning preset '{name}' (expected one of {', '.join(presets)})")
        return presets[name]()

    def __len__(self) -> int:
        return len(self.node_factors) * len(self.dropouts) * len(self.learning_rates)

    def cells(self) -> List[Tuple[float, float, float]]:
        return list(itertools.product(self.node_factors, self.dropouts, self.learning_rates))


@dataclass
class TrialResult:
    """单个网格单元的结果"""
    config: TrainConfig
    val_mse: float
    n_params: int
    success: bool = True
    message: str = ""
    best_epoch: int = 0
    epochs_run: int = 0

    def sort_key(self) -> Tuple:
        # 失败的单元排在最后；末两项只用于打破完全并列
        return (0 if self.success else 1, self.val_mse, self.n_params, self.config.learning_rate,
                self.config.dropout, self.config.node_factor)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "node_factor": self.config.node_factor,
            "dropout": self.config.dropout,
            "learning_rate": self.config.learning_rate,
            "val_mse": self.val_mse if math.isfinite(self.val_mse) else None,
            "n_params": self.n_params,
            "success": self.success,
            "message": self.message,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
        }


@dataclass
class TuningResult:
    """搜索结果：最优配置、对应模型和完整排行榜"""
    best_config: TrainConfig
    model: Model
    history: TrainHistory
    leaderboard: List[TrialResult]

    def lookup(self, node_factor: float, dropout: float, learning_rate: float) -> Optional[TrialResult]:
        for trial in self.leaderboard:
            c = trial.config
            if (math.isclose(c.node_factor, node_factor) and math.isclose(c.dropout, dropout)
                    and math.isclose(c.learning_rate, learning_rate)):
                return trial
        return None


class _BestCell:
    """并行单元间共享的当前最优模型；只保留一个"""

    def __init__(self):
        self._lock = threading.Lock()
        self.key: Optional[Tuple] = None
        self.model: Optional[Model] = None
        self.history: Optional[TrainHistory] = None

    def offer(self, key: Tuple, model: Model, history: TrainHistory):
        with self._lock:
            if self.key is None or key < self.key:
                self.key, self.model, self.history = key, model, history


def _run_cell(dataset: Dataset, config: TrainConfig, fingerprint: Optional[str],
              n_params: int, best: _BestCell) -> TrialResult:
    model, history = train(dataset, config, fingerprint)
    trial = TrialResult(config, history.best_val_mse, n_params,
                        best_epoch=history.best_epoch, epochs_run=len(history))
    best.offer(trial.sort_key(), model, history)
    return trial


def tune(dataset: Dataset, grid: TuningGrid, seed: int = 0,
         base_config: Optional[TrainConfig] = None, jobs: int = 1,
         fingerprint: Optional[str] = None) -> TuningResult:
    """
    穷举搜索

    所有单元共用同一个种子（相同的划分与初始化随机流），失败的单元记录在排行榜中；
    排序键为 (验证 MSE, 参数个数, 学习率)。各单元训练完即与当前最优比较，只保留最优模型
    """
    if len(grid) == 0:
        raise ValueError("tuning grid must not be empty")
    base = base_config or TrainConfig()
    configs = [
        replace(base, node_factor=k, dropout=p, learning_rate=r, seed=seed)
        for k, p, r in grid.cells()
    ]
    n_params = [count_parameters(layer_sizes(dataset.n_anchors, c.node_factor)) for c in configs]
    logger.info(f"Tuning over {len(configs)} grid cells with jobs={jobs}")

    best = _BestCell()
    tasks = [(lambda c=c, n=n: _run_cell(dataset, c, fingerprint, n, best))
             for c, n in zip(configs, n_params)]
    results = run_tasks(tasks, jobs=jobs, description="grid cells")

    leaderboard: List[TrialResult] = []
    for config, n, result in zip(configs, n_params, results):
        if result.success:
            leaderboard.append(result.data)
        else:
            logger.warning(f"Grid cell k={config.node_factor} p={config.dropout} "
                           f"r={config.learning_rate:.6g} failed: {result.message}")
            leaderboard.append(TrialResult(config, math.inf, n, success=False,
                                           message=result.message))

    leaderboard.sort(key=TrialResult.sort_key)
    if not leaderboard[0].success or best.model is None:
        raise TrainingError("every grid cell failed to train", cells=len(configs))

    winner = leaderboard[0]
    logger.info(f"Best cell: k={winner.config.node_factor} p={winner.config.dropout} "
                f"r={winner.config.learning_rate:.6g} val MSE {winner.val_mse:.6g}")
    return TuningResult(winner.config, best.model, best.history, leaderboard)
