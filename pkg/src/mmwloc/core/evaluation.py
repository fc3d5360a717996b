# -*- coding: utf-8 -*-
"""
误差统计
欧氏定位误差、箱线图统计量（10/25/50/75/90 百分位）和经验累积分布
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# 百分位按顺序统计量之间线性插值
PERCENTILE_METHOD = "linear"

SUBMETER_THRESHOLD = 1.0

SUMMARY_FIELDS = ("n", "p10", "q1", "median", "q3", "p90", "mean", "submeter")


def euclidean_error(estimate, truth) -> Union[float, np.ndarray]:
    """直线距离，批输入逐行返回"""
    diff = np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float)
    err = np.sqrt(np.sum(diff ** 2, axis=-1))
    return float(err) if np.ndim(err) == 0 else err


@dataclass(frozen=True, eq=False)
class ErrorSummary:
    """误差统计摘要，可由逐样本误差重算"""
    errors: np.ndarray
    p10: float
    q1: float
    median: float
    q3: float
    p90: float
    mean: float
    submeter: float
    n: int

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in SUMMARY_FIELDS}


def summarize(errors) -> ErrorSummary:
    """计算箱线图统计量；空输入报错"""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("cannot summarize an empty error set")
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise ValueError("errors must be finite and non-negative")
    p10, q1, median, q3, p90 = np.percentile(e, [10, 25, 50, 75, 90], method=PERCENTILE_METHOD)
    return ErrorSummary(
        errors=e.copy(),
        p10=float(p10), q1=float(q1), median=float(median), q3=float(q3), p90=float(p90),
        # 精确舍入的求和，与样本顺序无关
        mean=math.fsum(e) / e.size,
        submeter=float(np.count_nonzero(e < SUBMETER_THRESHOLD)) / e.size,
        n=int(e.size),
    )


def error_cdf(errors) -> np.ndarray:
    """
    右连续阶梯型经验 CDF

    返回形状 (k, 2) 的 (误差, 累计比例) 对，误差去重升序，最后一行比例为 1
    """
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    if e.size == 0:
        raise ValueError("cannot build a CDF from an empty error set")
    values, counts = np.unique(e, return_counts=True)
    fractions = np.cumsum(counts) / e.size
    fractions[-1] = 1.0
    return np.column_stack([values, fractions])


def cdf_frame(errors) -> pd.DataFrame:
    """CDF 表格（error, fraction）"""
    curve = error_cdf(errors)
    return pd.DataFrame({"error": curve[:, 0], "fraction": curve[:, 1]})
