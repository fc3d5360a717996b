# -*- coding: utf-8 -*-
"""
任务管理器
在私有线程池上并行执行互相独立的任务，结果按提交顺序返回

每个任务自带由种子派生的随机数发生器，因此任意并行度下结果一致
"""

import logging
import traceback
from typing import Any, Callable, List, Optional, Sequence

from PySide6.QtCore import QObject, QRunnable, QThreadPool, Signal

logger = logging.getLogger(__name__)


class TaskResult:
    """任务执行结果封装"""

    def __init__(self, success: bool = True, data: Any = None,
                 message: str = "", error_details: str = "",
                 exception: Optional[BaseException] = None):
        self.success = success
        self.data = data
        self.message = message
        self.error_details = error_details
        self.exception = exception

    def __bool__(self):
        return self.success

    def __str__(self):
        return f"TaskResult(success={self.success}, message='{self.message}')"


def _execute(func: Callable[[], Any]) -> TaskResult:
    """执行单个任务并把异常转为失败结果"""
    try:
        return TaskResult(True, func())
    except Exception as e:
        return TaskResult(False, None, str(e) or type(e).__name__,
                          traceback.format_exc(), e)


class _TaskRunnable(QRunnable):
    """线程池中的单个任务"""

    def __init__(self, index: int, func: Callable[[], Any], results: List[Optional[TaskResult]]):
        super().__init__()
        self.setAutoDelete(True)
        self._index = index
        self._func = func
        self._results = results

    def run(self):
        # 每个任务只写自己的槽位
        self._results[self._index] = _execute(self._func)


class TaskRunner(QObject):
    """
    并行任务执行器

    jobs == 1 时在调用线程内顺序执行；信号在全部任务完成后由调用线程按顺序发出
    """

    # 信号定义
    task_finished = Signal(int, object)  # index, TaskResult
    progress = Signal(int, int)  # done, total

    def __init__(self, jobs: int = 1, parent=None):
        super().__init__(parent)
        if jobs < 1:
            raise ValueError(f"jobs must be at least 1, got {jobs}")
        self.jobs = int(jobs)
        self._pool: Optional[QThreadPool] = None
        if self.jobs > 1:
            self._pool = QThreadPool(self)
            self._pool.setMaxThreadCount(self.jobs)

    def run(self, tasks: Sequence[Callable[[], Any]], description: str = "tasks") -> List[TaskResult]:
        """执行全部任务，返回与 tasks 等长、同序的结果列表"""
        total = len(tasks)
        results: List[Optional[TaskResult]] = [None] * total
        if total == 0:
            return []

        logger.debug(f"Running {total} {description} with jobs={self.jobs}")
        if self._pool is None:
            for index, func in enumerate(tasks):
                results[index] = _execute(func)
        else:
            for index, func in enumerate(tasks):
                self._pool.start(_TaskRunnable(index, func, results))
            self._pool.waitForDone()

        failed = 0
        for index, result in enumerate(results):
            if result is None:
                result = TaskResult(False, None, "task did not run")
                results[index] = result
            if not result.success:
                failed += 1
            self.task_finished.emit(index, result)
            self.progress.emit(index + 1, total)

        if failed:
            logger.info(f"{failed} of {total} {description} failed")
        return results  # type: ignore[return-value]


def run_tasks(tasks: Sequence[Callable[[], Any]], jobs: int = 1,
              description: str = "tasks") -> List[TaskResult]:
    """便捷函数：创建临时执行器运行一批任务"""
    return TaskRunner(jobs).run(tasks, description)
