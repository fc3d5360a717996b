#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
错误管理器
统一管理所有错误处理，包括错误分类、诊断信息生成、错误日志等
命令行的单行诊断 `error: <code>: <message>` 也由这里生成
"""

import atexit
import logging
import traceback
from enum import Enum
from typing import Any, Dict, Optional

from PySide6.QtCore import QObject, Signal

logger = logging.getLogger(__name__)

# 分类后的错误单独记录，不进入控制台
error_logger = logging.getLogger("mmwloc.errors")
error_logger.propagate = False


class ErrorCategory(Enum):
    """错误分类枚举"""
    # 场景几何错误
    SCENARIO_GEOMETRY = "scenario_geometry"
    CLIENT_OUTSIDE = "client_outside"

    # 定位错误
    UNLOCALIZABLE = "unlocalizable"

    # 数据集错误
    DATASET = "dataset"
    DATASET_SCHEMA = "dataset_schema"

    # 模型与训练错误
    MODEL_FORMAT = "model_format"
    TRAINING = "training"
    STALE_CACHE = "stale_cache"

    # 配置与输入错误
    CONFIG = "config"
    FILE_NOT_FOUND = "file_not_found"
    USER_INPUT = "user_input"

    # 未知错误
    UNKNOWN = "unknown"


class ErrorSeverity(Enum):
    """错误严重程度"""
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"


class MmwlocError(Exception):
    """所有领域错误的基类，携带错误分类"""

    category = ErrorCategory.UNKNOWN

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.message = message
        self.context = context


class ScenarioError(MmwlocError):
    """场景几何非法（多边形、墙、AP位置）"""
    category = ErrorCategory.SCENARIO_GEOMETRY


class ClientOutsideRoomError(MmwlocError):
    """客户端位置不在房间内"""
    category = ErrorCategory.CLIENT_OUTSIDE


class UnlocalizableError(MmwlocError):
    """有效锚点不足，无法定位"""
    category = ErrorCategory.UNLOCALIZABLE


class DatasetError(MmwlocError):
    """数据集生成或标注失败"""
    category = ErrorCategory.DATASET


class SchemaError(MmwlocError):
    """文件格式不符合约定"""
    category = ErrorCategory.DATASET_SCHEMA


class ModelFormatError(MmwlocError):
    """模型文件或模型参数不一致"""
    category = ErrorCategory.MODEL_FORMAT


class TrainingError(MmwlocError):
    """训练过程出现非有限值或空划分"""
    category = ErrorCategory.TRAINING


class StaleCacheError(MmwlocError):
    """反向传播使用了与模型不匹配的缓存"""
    category = ErrorCategory.STALE_CACHE


class ConfigError(MmwlocError):
    """配置键或取值非法"""
    category = ErrorCategory.CONFIG


class ErrorInfo:
    """错误信息封装"""

    def __init__(self, category: ErrorCategory, severity: ErrorSeverity,
                 message: str, details: str = "", error_code: str = "",
                 exception: Exception = None, context: Dict[str, Any] = None):
        self.category = category
        self.severity = severity
        self.message = message
        self.details = details
        self.error_code = error_code or category.value
        self.exception = exception
        self.context = context or {}


class ErrorManager(QObject):
    """
    统一错误管理器

    功能：
    1. 错误分类和标准化
    2. 生成单行机器可解析的诊断
    3. 错误日志记录
    4. 错误统计
    """

    # 信号定义
    error_occurred = Signal(object)  # ErrorInfo对象

    def __init__(self, parent=None, log_file: Optional[str] = None):
        super().__init__(parent)
        self.error_statistics: Dict[str, Dict[str, int]] = {}
        self.log_file = None
        if log_file:
            self.set_log_file(log_file)

    def set_log_file(self, log_file: str):
        """设置错误日志文件"""
        try:
            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            ))
            for handler in list(error_logger.handlers):
                if isinstance(handler, logging.FileHandler):
                    error_logger.removeHandler(handler)
                    handler.close()
            error_logger.addHandler(file_handler)
            error_logger.setLevel(logging.DEBUG)
            self.log_file = log_file
        except OSError as e:
            logger.warning(f"Failed to setup error logging: {e}")

    def handle_exception(self, exception: Exception, context: Dict[str, Any] = None,
                         category: ErrorCategory = None) -> ErrorInfo:
        """
        处理异常

        Args:
            exception: 异常对象
            context: 上下文信息
            category: 错误分类（如果不指定则自动推断）

        Returns:
            ErrorInfo: 错误信息对象
        """
        if category is None:
            category = self._categorize_exception(exception)

        severity = self._determine_severity(exception, category)
        error_info = self._create_error_info(exception, category, severity, context)

        self._log_error(error_info)
        self._update_statistics(error_info)
        self.error_occurred.emit(error_info)
        return error_info

    def _categorize_exception(self, exception: Exception) -> ErrorCategory:
        """自动推断异常分类"""
        if isinstance(exception, MmwlocError):
            return exception.category
        if isinstance(exception, FileNotFoundError):
            return ErrorCategory.FILE_NOT_FOUND
        if isinstance(exception, (ValueError, KeyError, TypeError)):
            return ErrorCategory.USER_INPUT
        return ErrorCategory.UNKNOWN

    def _determine_severity(self, exception: Exception, category: ErrorCategory) -> ErrorSeverity:
        """确定错误严重程度"""
        if isinstance(exception, (MemoryError, SystemError)):
            return ErrorSeverity.CRITICAL
        if category in (ErrorCategory.USER_INPUT, ErrorCategory.CONFIG,
                        ErrorCategory.UNLOCALIZABLE):
            return ErrorSeverity.WARNING
        return ErrorSeverity.ERROR

    def _create_error_info(self, exception: Exception, category: ErrorCategory,
                           severity: ErrorSeverity, context: Dict[str, Any] = None) -> ErrorInfo:
        """创建错误信息对象"""
        merged = dict(getattr(exception, 'context', {}) or {})
        merged.update(context or {})

        message = getattr(exception, 'message', None) or str(exception) or type(exception).__name__
        if isinstance(exception, FileNotFoundError) and exception.filename:
            message = f"file not found: {exception.filename}"

        details = f"异常类型: {type(exception).__name__}\n"
        details += f"异常消息: {exception}\n"
        if merged:
            details += f"上下文: {merged}\n"

        return ErrorInfo(
            category=category,
            severity=severity,
            message=message,
            details=details,
            exception=exception,
            context=merged,
        )

    def _log_error(self, error_info: ErrorInfo):
        """记录错误到日志"""
        log_message = f"[{error_info.error_code}] {error_info.message}"
        if error_info.severity == ErrorSeverity.CRITICAL:
            error_logger.critical(log_message)
        elif error_info.severity == ErrorSeverity.ERROR:
            error_logger.error(log_message)
        elif error_info.severity == ErrorSeverity.WARNING:
            error_logger.warning(log_message)
        else:
            error_logger.info(log_message)

        if error_info.details:
            error_logger.debug(f"详细信息: {error_info.details}")
        if error_info.exception is not None:
            exc = error_info.exception
            error_logger.debug("异常堆栈: " + "".join(
                traceback.format_exception(type(exc), exc, exc.__traceback__)))

    def _update_statistics(self, error_info: ErrorInfo):
        """更新错误统计"""
        per_category = self.error_statistics.setdefault(error_info.category.value, {})
        severity_key = error_info.severity.value
        per_category[severity_key] = per_category.get(severity_key, 0) + 1

    @staticmethod
    def format_diagnostic(error_info: ErrorInfo) -> str:
        """生成单行诊断：error: <code>: <message>"""
        message = " ".join(str(error_info.message).split())
        return f"error: {error_info.error_code}: {message}"

    def get_error_statistics(self) -> Dict[str, Any]:
        """获取错误统计信息"""
        return {k: dict(v) for k, v in self.error_statistics.items()}


# 全局错误管理器实例
_global_error_manager: Optional[ErrorManager] = None


def get_error_manager(parent=None, log_file: str = None) -> ErrorManager:
    """获取全局错误管理器实例"""
    global _global_error_manager
    if _global_error_manager is None:
        _global_error_manager = ErrorManager(parent, log_file)
        atexit.register(release_error_manager)
    elif log_file:
        _global_error_manager.set_log_file(log_file)
    return _global_error_manager


def release_error_manager():
    """释放全局实例；须在 QtCore 模块卸载前执行，由 atexit 调用"""
    global _global_error_manager
    _global_error_manager = None
