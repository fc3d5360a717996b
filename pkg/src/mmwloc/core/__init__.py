# -*- coding: utf-8 -*-
"""
mmwloc 核心模块

包含所有核心功能类：
- 房间几何：多边形房间、虚拟锚点与无噪声到达角
- 测量与特征：带噪声测量、ADoA 特征、轨迹与数据集
- 浅层回归网络：前向/反向传播、Adam、训练与调参
- 几何 ADoA 定位：基线算法与不完美标签生成
- 误差统计与实验管理
- 错误管理器、配置管理器、任务管理器
"""

from .error_manager import (ErrorCategory, ErrorManager, ErrorSeverity, MmwlocError,
                            get_error_manager)
from .config_manager import ConfigCategory, ConfigManager
from .geometry import Room, Scenario, load_scenario
from .features import Dataset, LabelSource, build_dataset, load_dataset, save_dataset
from .neural_network import Model, TrainConfig, load_model, save_model, train
from .tuner import TuningGrid, tune
from .geoloc import GeoOptions, label_dataset, localize
from .evaluation import euclidean_error, summarize, error_cdf
from .experiment_manager import load_experiment, run_experiment, write_report

__all__ = [
    'ErrorCategory',
    'ErrorManager',
    'ErrorSeverity',
    'MmwlocError',
    'get_error_manager',
    'ConfigCategory',
    'ConfigManager',
    'Room',
    'Scenario',
    'load_scenario',
    'Dataset',
    'LabelSource',
    'build_dataset',
    'load_dataset',
    'save_dataset',
    'Model',
    'TrainConfig',
    'load_model',
    'save_model',
    'train',
    'TuningGrid',
    'tune',
    'GeoOptions',
    'label_dataset',
    'localize',
    'euclidean_error',
    'summarize',
    'error_cdf',
    'load_experiment',
    'run_experiment',
    'write_report',
]
