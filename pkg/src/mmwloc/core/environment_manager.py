#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
资源路径管理器
定位仓库自带的场景文件和实验描述文件
运行状态只来自命令行参数和配置文件，不读取任何环境变量
"""

import os
import sys
from pathlib import Path
from typing import Optional


class EnvironmentManager:
    """资源路径管理器"""

    SCENARIO_SUFFIX = ".json"

    def __init__(self, install_path: Optional[str] = None):
        self._install_path = install_path

    def get_install_path(self) -> str:
        """获取安装路径（仓库根目录）"""
        if self._install_path:
            return self._install_path

        # 如果是打包的exe
        if getattr(sys, 'frozen', False):
            return os.path.dirname(sys.executable)

        # 开发环境：src/mmwloc/core/ 向上三级
        return str(Path(__file__).resolve().parents[3])

    def get_resources_path(self) -> str:
        """获取资源路径"""
        return os.path.join(self.get_install_path(), "resources")

    def get_scenarios_path(self) -> str:
        """获取内置场景目录"""
        return os.path.join(self.get_resources_path(), "scenarios")

    def get_experiments_path(self) -> str:
        """获取内置实验描述目录"""
        return os.path.join(self.get_resources_path(), "experiments")

    def resolve_scenario(self, name_or_path: str) -> str:
        """
        解析场景参数

        已存在的文件路径原样返回；否则按内置场景名（如 rect3、lroom3）查找
        """
        if os.path.isfile(name_or_path):
            return name_or_path
        stem = Path(name_or_path).stem
        candidate = os.path.join(self.get_scenarios_path(), stem + self.SCENARIO_SUFFIX)
        if os.path.isfile(candidate):
            return candidate
        raise FileNotFoundError(2, "No such scenario", name_or_path)

    def resolve_experiment(self, name_or_path: str) -> str:
        """解析实验描述参数，规则同场景"""
        if os.path.isfile(name_or_path):
            return name_or_path
        candidate = os.path.join(self.get_experiments_path(), Path(name_or_path).stem + ".json")
        if os.path.isfile(candidate):
            return candidate
        raise FileNotFoundError(2, "No such experiment", name_or_path)


# 全局实例
_environment_manager = None


def get_environment_manager() -> EnvironmentManager:
    """获取资源路径管理器单例"""
    global _environment_manager
    if _environment_manager is None:
        _environment_manager = EnvironmentManager()
    return _environment_manager
