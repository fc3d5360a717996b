# -*- coding: utf-8 -*-
"""
配置管理系统
负责仿真、轨迹、训练、调参、几何定位和运行参数的集中管理
分层：默认值 ← JSON 配置文件 ← 命令行覆盖
"""

import json
import logging
import math
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

from PySide6.QtCore import QObject, Signal

from .error_manager import ConfigError
from .file_operations import atomic_write_json, read_json

logger = logging.getLogger(__name__)


class ConfigCategory(Enum):
    """配置类别枚举"""
    SIMULATION = "simulation"   # 噪声与数据规模
    TRAJECTORY = "trajectory"   # 轨迹生成
    TRAINING = "training"       # 网络训练
    TUNING = "tuning"           # 超参数搜索
    GEOLOC = "geoloc"           # 几何定位
    RUNTIME = "runtime"         # 种子与并行度


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _number_list(x) -> bool:
    return x is None or (isinstance(x, list) and len(x) > 0 and all(_is_number(v) for v in x))


class ConfigItem:
    """配置项封装"""

    def __init__(self, key: str, value: Any, category: ConfigCategory,
                 description: str = "", validator: Optional[Callable] = None,
                 options: Optional[List[Any]] = None):
        self.key = key
        self.value = value
        self.category = category
        self.description = description
        self.validator = validator
        self.options = options or []  # 可选值列表
        self.default_value = value

    def validate(self, value: Any) -> bool:
        """验证配置值"""
        if self.options and value not in self.options:
            return False
        if self.validator:
            try:
                return bool(self.validator(value))
            except Exception:
                return False
        return True


class ConfigManager(QObject):
    """
    配置管理器

    功能：
    1. 配置项的集中定义、默认值和验证
    2. JSON 配置文件加载（嵌套对象展开为点分键）
    3. 命令行覆盖
    4. 类型化视图（训练、几何定位、轨迹、调参网格）
    5. 配置导出
    6. 配置变更通知（config_changed）
    """

    # 信号定义
    config_changed = Signal(str, object, object)    # key, old_value, new_value

    def __init__(self, parent=None):
        super().__init__(parent)
        self._configs: Dict[str, ConfigItem] = {}
        self._init_default_configs()
        logger.debug(f"ConfigManager initialized with {len(self._configs)} items")

    def _init_default_configs(self):
        """初始化默认配置"""
        # 仿真设置
        self._add_config("simulation.sigma_deg", 5.0, ConfigCategory.SIMULATION,
                         "到达角噪声标准差（度）", validator=lambda x: _is_number(x) and x >= 0)
        self._add_config("simulation.trajectories", 30, ConfigCategory.SIMULATION,
                         "轨迹条数", validator=lambda x: _is_int(x) and x >= 0)
        self._add_config("simulation.points", 30, ConfigCategory.SIMULATION,
                         "每条轨迹的采样点数", validator=lambda x: _is_int(x) and x >= 2)
        self._add_config("simulation.labeling", "truth", ConfigCategory.SIMULATION,
                         "训练标签来源", options=["truth", "geo", "geometric"])

        # 轨迹设置
        self._add_config("trajectory.n_legs", 3, ConfigCategory.TRAJECTORY,
                         "每条轨迹的航段数", validator=lambda x: _is_int(x) and x >= 1)
        self._add_config("trajectory.max_leg_attempts", 1000, ConfigCategory.TRAJECTORY,
                         "单个航段的最大重采样次数", validator=lambda x: _is_int(x) and x >= 1)

        # 训练设置
        self._add_config("training.node_factor", 0.7, ConfigCategory.TRAINING,
                         "节点系数 k", validator=lambda x: _is_number(x) and 0 < x <= 1)
        self._add_config("training.dropout", 0.05, ConfigCategory.TRAINING,
                         "dropout 比例 p", validator=lambda x: _is_number(x) and 0 <= x < 1)
        self._add_config("training.learning_rate", 0.002, ConfigCategory.TRAINING,
                         "学习率 r", validator=lambda x: _is_number(x) and x > 0)
        self._add_config("training.batch_size", 32, ConfigCategory.TRAINING,
                         "小批量大小", validator=lambda x: _is_int(x) and x >= 1)
        self._add_config("training.max_epochs", 500, ConfigCategory.TRAINING,
                         "最大训练轮数", validator=lambda x: _is_int(x) and x >= 1)
        self._add_config("training.patience", 25, ConfigCategory.TRAINING,
                         "早停耐心轮数", validator=lambda x: _is_int(x) and x >= 1)
        self._add_config("training.val_fraction", 0.2, ConfigCategory.TRAINING,
                         "验证集比例", validator=lambda x: _is_number(x) and 0 < x < 1)

        # 调参设置
        self._add_config("tuning.preset", "full", ConfigCategory.TUNING,
                         "网格预设", options=["full", "compact"])
        self._add_config("tuning.node_factors", None, ConfigCategory.TUNING,
                         "节点系数候选（覆盖预设）", validator=_number_list)
        self._add_config("tuning.dropouts", None, ConfigCategory.TUNING,
                         "dropout 候选（覆盖预设）", validator=_number_list)
        self._add_config("tuning.learning_rates", None, ConfigCategory.TUNING,
                         "学习率候选（覆盖预设）", validator=_number_list)

        # 几何定位设置
        self._add_config("geoloc.grid_pitch", 0.25, ConfigCategory.GEOLOC,
                         "初始化网格间距（米）", validator=lambda x: _is_number(x) and x > 0)
        self._add_config("geoloc.max_iterations", 50, ConfigCategory.GEOLOC,
                         "最大迭代次数", validator=lambda x: _is_int(x) and x >= 0)
        self._add_config("geoloc.step_tol", 1e-6, ConfigCategory.GEOLOC,
                         "步长收敛阈值（米）", validator=lambda x: _is_number(x) and x > 0)
        self._add_config("geoloc.initial_damping", 1e-3, ConfigCategory.GEOLOC,
                         "初始阻尼", validator=lambda x: _is_number(x) and x > 0)
        self._add_config("geoloc.damping_factor", 10.0, ConfigCategory.GEOLOC,
                         "阻尼调整倍数", validator=lambda x: _is_number(x) and x > 1)
        self._add_config("geoloc.label_window", 1, ConfigCategory.GEOLOC,
                         "标签滑动平均窗口（1 为关闭）", validator=lambda x: _is_int(x) and x >= 1)

        # 运行设置
        self._add_config("runtime.seed", 0, ConfigCategory.RUNTIME,
                         "随机种子", validator=lambda x: _is_int(x) and x >= 0)
        self._add_config("runtime.jobs", 1, ConfigCategory.RUNTIME,
                         "并行任务数", validator=lambda x: _is_int(x) and x >= 1)

    def _add_config(self, key: str, value: Any, category: ConfigCategory,
                    description: str = "", validator: Optional[Callable] = None,
                    options: Optional[List[Any]] = None):
        self._configs[key] = ConfigItem(key, value, category, description, validator, options)

    def set_config(self, key: str, value: Any, notify: bool = True):
        """设置配置值；未知键或非法取值抛出 ConfigError"""
        if key not in self._configs:
            raise ConfigError(f"unknown config key '{key}'", key=key)

        config_item = self._configs[key]
        # 浮点默认值的项也接受整数（如 sigma_deg = 5）
        if isinstance(config_item.default_value, float) and _is_int(value):
            value = float(value)
        if not config_item.validate(value):
            raise ConfigError(f"invalid value for '{key}': {value!r}", key=key)

        old_value = config_item.value
        config_item.value = value
        if notify and old_value != value:
            self.config_changed.emit(key, old_value, value)
        logger.debug(f"Config updated: {key} = {value}")

    def get_config(self, key: str, default: Any = None) -> Any:
        """获取配置值"""
        if key in self._configs:
            return self._configs[key].value
        return default

    @staticmethod
    def flatten(data: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
        """嵌套对象展开为点分键"""
        flat: Dict[str, Any] = {}
        for key, value in data.items():
            full_key = f"{prefix}.{key}" if prefix else str(key)
            if isinstance(value, dict):
                flat.update(ConfigManager.flatten(value, full_key))
            else:
                flat[full_key] = value
        return flat

    def apply(self, values: Dict[str, Any]):
        """批量设置（嵌套或点分键均可）"""
        for key, value in self.flatten(values).items():
            self.set_config(key, value)

    def load_file(self, file_path: str):
        """加载 JSON 配置文件"""
        try:
            data = read_json(file_path)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {file_path} is not valid JSON: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config file {file_path} must contain a JSON object")
        self.apply(data)
        logger.info(f"Configs loaded from {file_path}")

    def apply_overrides(self, overrides: Dict[str, Any]):
        """应用命令行覆盖，值为 None 的项跳过"""
        for key, value in overrides.items():
            if value is not None:
                self.set_config(key, value)

    def to_nested(self) -> Dict[str, Any]:
        """导出为按类别嵌套的字典"""
        nested: Dict[str, Dict[str, Any]] = {}
        for key, item in self._configs.items():
            name = key.split(".", 1)[1]
            nested.setdefault(item.category.value, {})[name] = item.value
        return nested

    def export(self, file_path: str) -> str:
        """导出配置文件（可被 --config 再次读取）"""
        atomic_write_json(file_path, self.to_nested())
        logger.info(f"Configs exported to {file_path}")
        return str(file_path)

    # 类型化视图

    def sigma_rad(self) -> float:
        return math.radians(self.get_config("simulation.sigma_deg"))

    def train_config(self):
        """训练配置"""
        from .neural_network import TrainConfig
        return TrainConfig(
            node_factor=float(self.get_config("training.node_factor")),
            dropout=float(self.get_config("training.dropout")),
            learning_rate=float(self.get_config("training.learning_rate")),
            batch_size=int(self.get_config("training.batch_size")),
            max_epochs=int(self.get_config("training.max_epochs")),
            patience=int(self.get_config("training.patience")),
            val_fraction=float(self.get_config("training.val_fraction")),
            seed=int(self.get_config("runtime.seed")),
        )

    def set_train_config(self, config):
        """写回训练配置（调参得到的最优组合）"""
        self.set_config("training.node_factor", config.node_factor)
        self.set_config("training.dropout", config.dropout)
        self.set_config("training.learning_rate", config.learning_rate)
        self.set_config("training.batch_size", config.batch_size)
        self.set_config("training.max_epochs", config.max_epochs)
        self.set_config("training.patience", config.patience)
        self.set_config("training.val_fraction", config.val_fraction)
        self.set_config("runtime.seed", config.seed)

    def geo_options(self):
        """几何定位参数"""
        from .geoloc import GeoOptions
        return GeoOptions(
            grid_pitch=float(self.get_config("geoloc.grid_pitch")),
            max_iterations=int(self.get_config("geoloc.max_iterations")),
            step_tol=float(self.get_config("geoloc.step_tol")),
            initial_damping=float(self.get_config("geoloc.initial_damping")),
            damping_factor=float(self.get_config("geoloc.damping_factor")),
            label_window=int(self.get_config("geoloc.label_window")),
        )

    def trajectory_options(self) -> Dict[str, int]:
        """轨迹生成参数"""
        return {
            "n_legs": int(self.get_config("trajectory.n_legs")),
            "max_leg_attempts": int(self.get_config("trajectory.max_leg_attempts")),
        }

    def tuning_grid(self):
        """调参网格：预设值被显式候选列表覆盖"""
        from .tuner import TuningGrid
        grid = TuningGrid.preset(self.get_config("tuning.preset"))
        node_factors = self.get_config("tuning.node_factors")
        dropouts = self.get_config("tuning.dropouts")
        learning_rates = self.get_config("tuning.learning_rates")
        try:
            return TuningGrid(
                tuple(float(x) for x in node_factors) if node_factors else grid.node_factors,
                tuple(float(x) for x in dropouts) if dropouts else grid.dropouts,
                tuple(float(x) for x in learning_rates) if learning_rates else grid.learning_rates,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e
