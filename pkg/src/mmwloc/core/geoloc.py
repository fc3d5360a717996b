# -*- coding: utf-8 -*-
"""
几何 ADoA 定位
网格粗搜索初始化，再用带阻尼的高斯-牛顿（Levenberg 式）细化包裹后的方位角差残差；
既作为几何基线，也作为生成不完美标签的标注器
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .angle_utils import wrap_angle
from .error_manager import DatasetError, UnlocalizableError
from .features import Dataset, FeatureVector, LabelSource
from .geometry import GEOMETRY_TOL, AnchorRoster, Room
from .task_manager import run_tasks

logger = logging.getLogger(__name__)

# 阻尼超过该值时认为无法继续下降
MAX_DAMPING = 1e12


@dataclass(frozen=True)
class GeoOptions:
    """几何定位参数"""
    grid_pitch: float = 0.25
    max_iterations: int = 50
    step_tol: float = 1e-6
    initial_damping: float = 1e-3
    damping_factor: float = 10.0
    label_window: int = 1

    def __post_init__(self):
        if self.grid_pitch <= 0:
            raise ValueError(f"grid_pitch must be positive, got {self.grid_pitch}")
        if self.max_iterations < 0:
            raise ValueError(f"max_iterations must be non-negative, got {self.max_iterations}")
        if self.step_tol <= 0:
            raise ValueError(f"step_tol must be positive, got {self.step_tol}")
        if self.initial_damping <= 0 or self.damping_factor <= 1:
            raise ValueError("initial_damping must be positive and damping_factor greater than 1")
        if self.label_window < 1:
            raise ValueError(f"label_window must be at least 1, got {self.label_window}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid_pitch": self.grid_pitch,
            "max_iterations": self.max_iterations,
            "step_tol": self.step_tol,
            "initial_damping": self.initial_damping,
            "damping_factor": self.damping_factor,
            "label_window": self.label_window,
        }


@dataclass(frozen=True)
class GeoEstimate:
    """定位结果"""
    position: Tuple[float, float]
    residual_norm: float
    iterations: int
    converged: bool
    used_anchors: Tuple[int, ...]
    cost_history: Tuple[float, ...] = field(default=(), compare=False, repr=False)


def bearing(x, anchor_position) -> float:
    """从 x 看向锚点的方位角，包裹到 (-π, π]"""
    d = np.asarray(anchor_position, dtype=float) - np.asarray(x, dtype=float)
    if math.hypot(d[0], d[1]) <= GEOMETRY_TOL:
        raise UnlocalizableError("bearing is undefined for coincident points")
    return wrap_angle(math.atan2(d[1], d[0]))


def bearing_jacobian(x, anchor_position) -> np.ndarray:
    """方位角对 x 的梯度 (∂θ/∂x, ∂θ/∂y)"""
    d = np.asarray(anchor_position, dtype=float) - np.asarray(x, dtype=float)
    r2 = float(d @ d)
    if r2 <= GEOMETRY_TOL ** 2:
        raise UnlocalizableError("bearing is undefined for coincident points")
    return np.array([d[1] / r2, -d[0] / r2])


def _bearings_and_gradients(x: np.ndarray, positions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """批量方位角和梯度；与锚点重合时梯度记为 0"""
    d = positions - x
    r2 = np.sum(d * d, axis=1)
    theta = np.arctan2(d[:, 1], d[:, 0])
    safe = np.where(r2 > GEOMETRY_TOL ** 2, r2, np.inf)
    grad = np.column_stack([d[:, 1] / safe, -d[:, 0] / safe])
    return theta, grad


def _usable(fv: FeatureVector) -> Tuple[np.ndarray, np.ndarray]:
    """有效特征槽位及其锚点 id"""
    slots = np.flatnonzero(fv.mask)
    return slots, fv.other_anchors[slots]


def adoa_residuals(x, fv: FeatureVector, roster: AnchorRoster) -> np.ndarray:
    """
    有效特征的包裹残差 wrap(adoa_j - (θ_j(x) - θ_ref(x)))

    占位条目被跳过；可用锚点（含参考）少于 2 个时无法计算
    """
    if len(fv) != roster.n_anchors - 1:
        raise ValueError(f"feature length {len(fv)} does not match roster of {roster.n_anchors} anchors")
    slots, anchors = _usable(fv)
    if len(slots) < 1:
        raise UnlocalizableError("fewer than 2 usable anchors")
    theta, _ = _bearings_and_gradients(np.asarray(x, dtype=float), roster.positions)
    predicted = theta[anchors] - theta[fv.ref_anchor]
    return np.atleast_1d(wrap_angle(fv.adoa[slots] - predicted))


class GeoLocalizer:
    """
    几何定位器

    缓存房间内部网格到各锚点的方位角表，供粗搜索复用
    """

    def __init__(self, roster: AnchorRoster, room: Room, options: Optional[GeoOptions] = None):
        self.roster = roster
        self.room = room
        self.options = options or GeoOptions()
        self.positions = roster.positions
        self.grid = room.sample_grid(self.options.grid_pitch)
        if len(self.grid) == 0:
            self.grid = room.interior_point[None, :]
        d = self.positions[None, :, :] - self.grid[:, None, :]
        self.grid_bearings = np.arctan2(d[..., 1], d[..., 0])
        logger.debug(f"GeoLocalizer grid: {len(self.grid)} points x {roster.n_anchors} anchors")

    def _cost(self, x: np.ndarray, adoa: np.ndarray, anchors: np.ndarray, ref: int) -> float:
        theta, _ = _bearings_and_gradients(x, self.positions)
        r = wrap_angle(adoa - (theta[anchors] - theta[ref]))
        return float(np.sum(np.square(r)))

    def grid_search(self, fv: FeatureVector) -> Tuple[np.ndarray, float]:
        """粗搜索：返回残差平方和最小的网格点"""
        slots, anchors = _usable(fv)
        predicted = self.grid_bearings[:, anchors] - self.grid_bearings[:, [fv.ref_anchor]]
        residuals = wrap_angle(fv.adoa[slots][None, :] - predicted)
        costs = np.sum(np.square(residuals), axis=1)
        best = int(np.argmin(costs))
        return self.grid[best].copy(), float(costs[best])

    def localize(self, fv: FeatureVector) -> GeoEstimate:
        """网格初始化加阻尼高斯-牛顿细化，迭代点始终投影在房间内"""
        if len(fv) != self.roster.n_anchors - 1:
            raise ValueError(f"feature length {len(fv)} does not match roster of "
                             f"{self.roster.n_anchors} anchors")
        slots, anchors = _usable(fv)
        if len(slots) < 2:
            raise UnlocalizableError(f"only {len(slots) + 1} usable anchors, need at least 3")

        opts = self.options
        ref = fv.ref_anchor
        adoa = fv.adoa[slots]
        x, cost = self.grid_search(fv)
        history = [cost]
        damping = opts.initial_damping
        converged = False
        iterations = 0

        for iterations in range(1, opts.max_iterations + 1):
            theta, grad = _bearings_and_gradients(x, self.positions)
            r = wrap_angle(adoa - (theta[anchors] - theta[ref]))
            J = -(grad[anchors] - grad[ref])

            JtJ = J.T @ J
            step = -np.linalg.lstsq(JtJ + damping * np.eye(2), J.T @ r, rcond=None)[0]
            if np.hypot(*step) < opts.step_tol:
                converged = True
                break

            candidate = self.room.project_inside(x + step)
            candidate_cost = self._cost(candidate, adoa, anchors, ref)
            if candidate_cost < cost:
                moved = float(np.hypot(*(candidate - x)))
                x, cost = candidate, candidate_cost
                history.append(cost)
                damping = max(damping / opts.damping_factor, 1e-15)
                if moved < opts.step_tol:
                    converged = True
                    break
            else:
                damping *= opts.damping_factor
                if damping > MAX_DAMPING:
                    break

        return GeoEstimate(
            position=(float(x[0]), float(x[1])),
            residual_norm=math.sqrt(cost),
            iterations=iterations,
            converged=converged,
            used_anchors=tuple([ref] + [int(a) for a in anchors]),
            cost_history=tuple(history),
        )


# 同时保留的定位器个数
LOCALIZER_CACHE_SIZE = 8


@lru_cache(maxsize=LOCALIZER_CACHE_SIZE)
def _cached_localizer(vertices: bytes, roster: AnchorRoster, options: GeoOptions) -> GeoLocalizer:
    room = Room(np.frombuffer(vertices, dtype=float).reshape(-1, 2))
    return GeoLocalizer(roster, room, options)


def get_localizer(roster: AnchorRoster, room: Room, options: Optional[GeoOptions] = None) -> GeoLocalizer:
    """按 (房间顶点, 锚点表, 参数) 的取值缓存定位器，最近最少使用的先淘汰"""
    vertices = np.ascontiguousarray(room.vertices, dtype=float).tobytes()
    return _cached_localizer(vertices, roster, options or GeoOptions())


def localize(fv: FeatureVector, roster: AnchorRoster, room: Room,
             options: Optional[GeoOptions] = None) -> GeoEstimate:
    """单个特征向量的几何定位"""
    return get_localizer(roster, room, options).localize(fv)


def localize_dataset(dataset: Dataset, roster: AnchorRoster, room: Room,
                     options: Optional[GeoOptions] = None, jobs: int = 1
                     ) -> List[Optional[GeoEstimate]]:
    """逐样本定位，按轨迹分组并行；失败的样本返回 None"""
    localizer = get_localizer(roster, room, options)
    groups = [np.flatnonzero(dataset.traj == t) for t in np.unique(dataset.traj)]

    def run_group(indices: np.ndarray):
        out = []
        for i in indices:
            try:
                out.append(localizer.localize(dataset.feature_vector(int(i))))
            except UnlocalizableError as e:
                logger.debug(f"sample {int(i)} not localizable: {e}")
                out.append(None)
        return out

    results = run_tasks([(lambda g=g: run_group(g)) for g in groups], jobs=jobs,
                        description="localization groups")
    estimates: List[Optional[GeoEstimate]] = [None] * len(dataset)
    for indices, result in zip(groups, results):
        if not result.success:
            raise DatasetError(f"localization failed: {result.message}")
        for i, estimate in zip(indices, result.data):
            estimates[int(i)] = estimate
    return estimates


def smooth_labels(positions: np.ndarray, traj: np.ndarray, step: np.ndarray,
                  window: int, room: Room) -> np.ndarray:
    """按轨迹做居中滑动平均，结果投影回房间内"""
    if window <= 1:
        return positions.copy()
    smoothed = positions.copy()
    before = (window - 1) // 2
    after = window - 1 - before
    for t in np.unique(traj):
        idx = np.flatnonzero(traj == t)
        idx = idx[np.argsort(step[idx], kind="stable")]
        P = positions[idx]
        for k, i in enumerate(idx):
            lo, hi = max(0, k - before), min(len(idx), k + after + 1)
            smoothed[i] = room.project_inside(P[lo:hi].mean(axis=0))
    return smoothed


def label_dataset(dataset: Dataset, roster: AnchorRoster, room: Room,
                  options: Optional[GeoOptions] = None, jobs: int = 1,
                  total_requested: Optional[int] = None) -> Dataset:
    """
    用几何定位结果替换标签

    求解失败的样本被丢弃，保留逐样本残差用于审计；累计丢弃过半时报错
    """
    options = options or GeoOptions()
    if len(dataset) == 0:
        return dataset.with_labels(dataset.labels, LabelSource.GEOMETRIC, audit={
            "residual_norm": np.zeros(0), "converged": np.zeros(0, dtype=bool),
            "iterations": np.zeros(0, dtype=int)})
    if dataset.n_anchors != roster.n_anchors:
        raise DatasetError(f"dataset has {dataset.n_anchors} anchors but the roster has "
                           f"{roster.n_anchors}")

    estimates = localize_dataset(dataset, roster, room, options, jobs)
    keep = np.array([e is not None for e in estimates], dtype=bool)
    failed = int(np.count_nonzero(~keep))
    total = total_requested if total_requested is not None else len(dataset) + dataset.dropped
    dropped = dataset.dropped + failed
    if failed:
        logger.warning(f"Geometric labeling dropped {failed} of {len(dataset)} samples")
    if dropped > 0.5 * total:
        raise DatasetError(f"{dropped} of {total} samples dropped (more than half)",
                           dropped=dropped, total=total)

    kept = [e for e in estimates if e is not None]
    labeled = dataset.subset(np.flatnonzero(keep))
    positions = np.array([e.position for e in kept], dtype=float).reshape(-1, 2)
    positions = smooth_labels(positions, labeled.traj, labeled.step, options.label_window, room)
    audit = {
        "residual_norm": np.array([e.residual_norm for e in kept], dtype=float),
        "converged": np.array([e.converged for e in kept], dtype=bool),
        "iterations": np.array([e.iterations for e in kept], dtype=int),
    }
    n_unconverged = int(np.count_nonzero(~audit["converged"]))
    if n_unconverged:
        logger.warning(f"{n_unconverged} geometric labels did not converge")

    labeled = labeled.with_labels(positions, LabelSource.GEOMETRIC, audit)
    labeled.dropped = dropped
    errors = np.hypot(*(labeled.labels - labeled.truth).T)
    logger.info(f"Geometric labels: {len(labeled)} samples, median label error "
                f"{float(np.median(errors)) if len(errors) else 0.0:.4g} m")
    return labeled
