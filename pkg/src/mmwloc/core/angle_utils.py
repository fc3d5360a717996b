# -*- coding: utf-8 -*-
"""
角度工具
角度统一为弧度，包裹到 (-π, π]
"""

import numpy as np

TWO_PI = 2.0 * np.pi

# ADoA 量化格点：整圆 2^24 等分
LATTICE_BITS = 24
LATTICE_SIZE = 1 << LATTICE_BITS
LATTICE_STEP = TWO_PI / LATTICE_SIZE


def wrap_angle(angle):
    """将角度包裹到 (-π, π]，支持标量和数组"""
    x = np.asarray(angle, dtype=float)
    wrapped = np.pi - np.mod(np.pi - x, TWO_PI)
    # np.mod 在极小负数上可能返回 2π
    wrapped = np.where(wrapped <= -np.pi, wrapped + TWO_PI, wrapped)
    # 已在区间内的值原样保留，避免往返运算引入舍入
    wrapped = np.where((x > -np.pi) & (x <= np.pi), x, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def circular_diff(angle0, angle1):
    """包裹后的角度差 angle0 - angle1"""
    return wrap_angle(np.asarray(angle0, dtype=float) - np.asarray(angle1, dtype=float))


def lattice_diff(angle, reference):
    """
    量化的角度差

    先在 2^24 格点上取整再按整数取模，整圆的倍数在整数域内精确消去，
    因此参考角的任意公共偏移都不会改变结果。
    """
    raw = np.asarray(angle, dtype=float) - np.asarray(reference, dtype=float)
    k = np.rint(raw / LATTICE_STEP).astype(np.int64)
    k = np.mod(k, LATTICE_SIZE)
    k = np.where(k > LATTICE_SIZE // 2, k - LATTICE_SIZE, k)
    return k.astype(float) * LATTICE_STEP
