# -*- coding: utf-8 -*-
"""
测量与特征
由无噪声几何合成带噪声的客户端测量，计算与朝向无关的 ADoA 特征向量，
生成随机航点轨迹并组装训练/测试数据集
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .angle_utils import TWO_PI, lattice_diff, wrap_angle
from .error_manager import (ClientOutsideRoomError, DatasetError, SchemaError,
                            UnlocalizableError)
from .file_operations import atomic_write_frame, atomic_write_json, read_frame, read_json
from .geometry import AnchorRoster, Room, Scenario, exact_aoa_many, segment_blocked
from .task_manager import run_tasks

logger = logging.getLogger(__name__)

# 缺失锚点的占位值，位于 (-π, π] 之外
SENTINEL = -10.0

# 参考锚点选取规则：按锚点表顺序的第一个有效读数
REFERENCE_RULE = "first_valid"

# 超过该比例的样本被丢弃时整个数据集视为失败
MAX_DROP_FRACTION = 0.5

AUDIT_COLUMNS = ("residual_norm", "converged", "iterations")


class LabelSource(Enum):
    """标签来源"""
    TRUTH = "truth"
    GEOMETRIC = "geometric"

    @classmethod
    def parse(cls, value: Any) -> "LabelSource":
        """解析标签来源，接受 geo 简写"""
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        if text == "geo":
            return cls.GEOMETRIC
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown label source '{value}' (expected truth or geo)") from None


@dataclass(frozen=True)
class Reading:
    """单个锚点的读数"""
    anchor_id: int
    aoa: Optional[float]
    valid: bool


@dataclass(frozen=True)
class Measurement:
    """某位置的一次测量：每个锚点一个槽位，局部坐标系角度"""
    client_truth: Tuple[float, float]
    orientation: float
    readings: Tuple[Reading, ...]

    @property
    def angles(self) -> np.ndarray:
        """按锚点顺序的角度数组，无效处为 NaN"""
        return np.array([r.aoa if r.valid else np.nan for r in self.readings], dtype=float)

    @property
    def valid(self) -> np.ndarray:
        return np.array([r.valid for r in self.readings], dtype=bool)

    @classmethod
    def from_angles(cls, client_truth, orientation: float, angles: np.ndarray) -> "Measurement":
        readings = tuple(
            Reading(i, None, False) if np.isnan(a) else Reading(i, float(a), True)
            for i, a in enumerate(np.asarray(angles, dtype=float))
        )
        return cls((float(client_truth[0]), float(client_truth[1])), float(orientation), readings)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """N_a-1 个 ADoA 值，参考锚点的槽位已移除"""
    adoa: np.ndarray
    ref_anchor: int
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.adoa)

    @property
    def other_anchors(self) -> np.ndarray:
        """各特征槽位对应的锚点 id"""
        n_anchors = len(self.adoa) + 1
        return np.delete(np.arange(n_anchors), self.ref_anchor)

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.mask))

    def with_mask(self, mask: np.ndarray) -> "FeatureVector":
        """返回替换掩码后的特征（被屏蔽槽位改写为占位值）"""
        mask = np.asarray(mask, dtype=bool)
        return FeatureVector(np.where(mask, self.adoa, SENTINEL), self.ref_anchor, mask)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (self.ref_anchor == other.ref_anchor
                and np.array_equal(self.adoa, other.adoa)
                and np.array_equal(self.mask, other.mask))


@dataclass(frozen=True)
class Sample:
    """数据集中的一个样本"""
    features: FeatureVector
    label: Tuple[float, float]
    truth: Tuple[float, float]
    label_source: LabelSource
    traj: int = 0
    step: int = 0


@dataclass
class Dataset:
    """
    数据集（列式存储）

    adoa/mask 形状 (n, N_a-1)，truth/labels 形状 (n, 2)
    """
    adoa: np.ndarray
    mask: np.ndarray
    ref_anchor: np.ndarray
    truth: np.ndarray
    labels: np.ndarray
    label_source: LabelSource
    traj: np.ndarray
    step: np.ndarray
    fingerprint: str = ""
    scenario: str = ""
    n_anchors: int = 0
    sigma: float = 0.0
    seed: Optional[int] = None
    split: str = ""
    dropped: int = 0
    audit: Optional[Dict[str, np.ndarray]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.truth)
        for name in ("adoa", "mask", "ref_anchor", "labels", "traj", "step"):
            if len(getattr(self, name)) != n:
                raise DatasetError(f"dataset column '{name}' has {len(getattr(self, name))} rows, expected {n}")
        if self.n_anchors == 0 and self.adoa.ndim == 2:
            self.n_anchors = self.adoa.shape[1] + 1

    def __len__(self) -> int:
        return len(self.truth)

    @property
    def n_features(self) -> int:
        return self.n_anchors - 1

    @classmethod
    def empty(cls, n_anchors: int, **kwargs) -> "Dataset":
        width = max(n_anchors - 1, 0)
        return cls(
            adoa=np.zeros((0, width)), mask=np.zeros((0, width), dtype=bool),
            ref_anchor=np.zeros(0, dtype=int), truth=np.zeros((0, 2)),
            labels=np.zeros((0, 2)), traj=np.zeros(0, dtype=int), step=np.zeros(0, dtype=int),
            n_anchors=n_anchors, **kwargs)

    def feature_vector(self, index: int) -> FeatureVector:
        return FeatureVector(self.adoa[index].copy(), int(self.ref_anchor[index]),
                             self.mask[index].copy())

    def sample(self, index: int) -> Sample:
        return Sample(
            features=self.feature_vector(index),
            label=(float(self.labels[index, 0]), float(self.labels[index, 1])),
            truth=(float(self.truth[index, 0]), float(self.truth[index, 1])),
            label_source=self.label_source,
            traj=int(self.traj[index]),
            step=int(self.step[index]),
        )

    @property
    def samples(self) -> List[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        """按索引取子集（保持给定顺序）"""
        idx = np.asarray(indices, dtype=int)
        audit = None
        if self.audit is not None:
            audit = {k: v[idx] for k, v in self.audit.items()}
        return replace(
            self,
            adoa=self.adoa[idx], mask=self.mask[idx], ref_anchor=self.ref_anchor[idx],
            truth=self.truth[idx], labels=self.labels[idx],
            traj=self.traj[idx], step=self.step[idx], audit=audit,
            metadata=dict(self.metadata),
        )

    def take(self, n: int) -> "Dataset":
        """取前 n 个样本"""
        if n < 0 or n > len(self):
            raise DatasetError(f"cannot take {n} samples from a dataset of {len(self)}",
                               requested=n, available=len(self))
        return self.subset(np.arange(n))

    def with_labels(self, labels: np.ndarray, label_source: LabelSource,
                    audit: Optional[Dict[str, np.ndarray]] = None) -> "Dataset":
        return replace(self, labels=np.asarray(labels, dtype=float).reshape(-1, 2),
                       label_source=label_source, audit=audit, metadata=dict(self.metadata))

    def meta(self) -> Dict[str, Any]:
        """数据集元信息（写入旁路 JSON）"""
        return {
            "scenario": self.scenario,
            "fingerprint": self.fingerprint,
            "n_anchors": self.n_anchors,
            "sigma": self.sigma,
            "seed": self.seed,
            "split": self.split,
            "label_source": self.label_source.value,
            "reference_rule": REFERENCE_RULE,
            "n_samples": len(self),
            "dropped": self.dropped,
            **self.metadata,
        }


def _draw_noise(rng: np.random.Generator, sigma: float, shape) -> np.ndarray:
    """零均值高斯噪声；sigma 为 0 时仍然消耗同样数量的随机数"""
    return rng.normal(0.0, sigma, size=shape)


def synth_measurement(client, orientation: float, roster: AnchorRoster, room: Room,
                      sigma: float, rng: np.random.Generator) -> Measurement:
    """合成单点测量：全局方位角减去朝向，叠加高斯噪声并包裹"""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    c = np.asarray(client, dtype=float)
    if not room.contains(c):
        raise ClientOutsideRoomError(f"client ({c[0]:.6g}, {c[1]:.6g}) is outside the room",
                                     client=tuple(c))
    angles = synth_measurements(c[None, :], np.array([orientation]), roster, room, sigma, rng)[0]
    return Measurement.from_angles(c, orientation, angles)


def synth_measurements(clients: np.ndarray, orientations: np.ndarray, roster: AnchorRoster,
                       room: Room, sigma: float, rng: np.random.Generator,
                       check_inside: bool = True) -> np.ndarray:
    """
    批量合成局部坐标系下的带噪声到达角

    返回形状 (n, N_a) 的数组，无效路径为 NaN；噪声按行依次抽取
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    C = np.atleast_2d(np.asarray(clients, dtype=float))
    if check_inside and not room.contains_many(C).all():
        raise ClientOutsideRoomError("client position outside the room")

    exact = np.column_stack([
        exact_aoa_many(C, anchor, room, check_inside=False) for anchor in roster
    ]) if len(roster) else np.zeros((len(C), 0))
    noise = _draw_noise(rng, sigma, exact.shape)
    local = wrap_angle(exact - np.asarray(orientations, dtype=float)[:, None] + noise)
    return np.where(np.isnan(exact), np.nan, local)


def rotate_measurement(m: Measurement, phi: float) -> Measurement:
    """客户端再转动 phi：所有局部角度减去 phi"""
    angles = m.angles
    rotated = np.where(np.isnan(angles), np.nan, wrap_angle(angles - phi))
    return Measurement.from_angles(m.client_truth, m.orientation + phi, rotated)


def bias_measurement(m: Measurement, beta: float) -> Measurement:
    """所有有效角度加上公共偏置 beta"""
    angles = m.angles
    biased = np.where(np.isnan(angles), np.nan, wrap_angle(angles + beta))
    return Measurement.from_angles(m.client_truth, m.orientation, biased)


def features_from_angles(angles: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    批量计算 ADoA 特征

    Args:
        angles: 形状 (n, N_a)，无效读数为 NaN

    Returns:
        (adoa, mask, ref_anchor, ok)，ok 标记有效读数不少于 2 的行
    """
    A = np.atleast_2d(np.asarray(angles, dtype=float))
    n, n_anchors = A.shape
    valid = ~np.isnan(A)
    ok = valid.sum(axis=1) >= 2
    ref = np.where(valid.any(axis=1), np.argmax(valid, axis=1), 0)

    ref_angle = A[np.arange(n), ref]
    diffs = lattice_diff(np.nan_to_num(A), np.nan_to_num(ref_angle)[:, None])

    # 删除每行参考锚点所在的列
    keep = np.ones((n, n_anchors), dtype=bool)
    keep[np.arange(n), ref] = False
    adoa = diffs[keep].reshape(n, n_anchors - 1)
    mask = valid[keep].reshape(n, n_anchors - 1)
    adoa = np.where(mask, adoa, SENTINEL)
    return adoa, mask, ref, ok


def compute_features(m: Measurement, roster: AnchorRoster) -> FeatureVector:
    """计算单个测量的特征向量；有效读数少于 2 个时无法定位"""
    angles = m.angles
    if len(angles) != len(roster):
        raise ValueError(f"measurement has {len(angles)} readings, roster has {len(roster)} anchors")
    adoa, mask, ref, ok = features_from_angles(angles[None, :])
    if not ok[0]:
        raise UnlocalizableError(
            f"only {int(np.count_nonzero(~np.isnan(angles)))} valid readings, need at least 2")
    return FeatureVector(adoa[0], int(ref[0]), mask[0])


def generate_trajectory(room: Room, n_points: int, rng: np.random.Generator,
                        n_legs: int = 3, max_leg_attempts: int = 1000) -> np.ndarray:
    """
    随机航点轨迹

    航点在房间内均匀采样，穿墙的航段重新采样；超过尝试次数时改为朝房间内部点走一小段。
    返回按弧长等间距采样的 n_points 个点，形状 (n_points, 2)
    """
    if n_points < 2:
        raise ValueError(f"n_points must be at least 2, got {n_points}")
    if n_legs < 1:
        raise ValueError(f"n_legs must be at least 1, got {n_legs}")

    waypoints = [room.sample_uniform(rng)]
    for _ in range(n_legs):
        prev = waypoints[-1]
        for _attempt in range(max_leg_attempts):
            candidate = room.sample_uniform(rng)
            if not segment_blocked(prev, candidate, room) and room.contains(0.5 * (prev + candidate)):
                waypoints.append(candidate)
                break
        else:
            waypoints.append(_fallback_leg(room, prev))

    W = np.asarray(waypoints)
    seg = np.hypot(*np.diff(W, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0.0:
        return np.repeat(W[:1], n_points, axis=0)
    s = np.linspace(0.0, cum[-1], n_points)
    points = np.column_stack([np.interp(s, cum, W[:, 0]), np.interp(s, cum, W[:, 1])])
    points[0], points[-1] = W[0], W[-1]
    return points


def _fallback_leg(room: Room, start: np.ndarray) -> np.ndarray:
    """朝房间内部参考点的短航段，逐次减半直到不穿墙"""
    target = room.interior_point
    step = 0.5
    for _ in range(60):
        candidate = start + step * (target - start)
        if room.contains(candidate) and not segment_blocked(start, candidate, room):
            return candidate
        step *= 0.5
    return start.copy()


def trajectory_shape(n_samples: int) -> Tuple[int, int]:
    """训练集规模对应的 (轨迹数, 每条点数)：优先 30 点，其次 10 点"""
    if n_samples <= 0:
        return 0, 30
    if n_samples % 30 == 0:
        return n_samples // 30, 30
    if n_samples % 10 == 0:
        return n_samples // 10, 10
    return math.ceil(n_samples / 30), 30


def _simulate_trajectory(scenario: Scenario, n_points: int, sigma: float,
                         seed_seq: np.random.SeedSequence, n_legs: int,
                         max_leg_attempts: int) -> Dict[str, np.ndarray]:
    """生成一条轨迹并合成测量与特征"""
    rng = np.random.default_rng(seed_seq)
    room = scenario.room
    points = generate_trajectory(room, n_points, rng, n_legs=n_legs,
                                 max_leg_attempts=max_leg_attempts)
    orientations = rng.uniform(0.0, TWO_PI, size=n_points)
    angles = synth_measurements(points, orientations, scenario.roster, room, sigma, rng,
                                check_inside=False)
    adoa, mask, ref, ok = features_from_angles(angles)
    return {"points": points, "adoa": adoa, "mask": mask, "ref": ref, "ok": ok}


def build_dataset(scenario: Scenario, n_trajectories: int, n_points: int, sigma: float,
                  labeling: Any = LabelSource.TRUTH, seed: int = 0, jobs: int = 1,
                  split: str = "", geo_options=None, n_legs: int = 3,
                  max_leg_attempts: int = 1000) -> Dataset:
    """
    生成数据集

    每条轨迹使用由种子派生的独立随机流，输出按轨迹序号排列；
    无法计算特征的样本被丢弃并计数，丢弃过半时报错
    """
    labeling = LabelSource.parse(labeling)
    if n_trajectories < 0:
        raise ValueError(f"n_trajectories must be non-negative, got {n_trajectories}")
    roster = scenario.roster
    common = dict(fingerprint=scenario.fingerprint, scenario=scenario.name,
                  sigma=float(sigma), seed=seed, split=split)
    if n_trajectories == 0:
        return Dataset.empty(roster.n_anchors, label_source=labeling, **common)

    children = np.random.SeedSequence(seed).spawn(n_trajectories)
    tasks = [
        (lambda ss=ss: _simulate_trajectory(scenario, n_points, sigma, ss, n_legs, max_leg_attempts))
        for ss in children
    ]
    results = run_tasks(tasks, jobs=jobs, description="trajectories")
    for index, result in enumerate(results):
        if not result.success:
            raise DatasetError(f"trajectory {index} failed: {result.message}", trajectory=index)

    parts = [r.data for r in results]
    ok = np.concatenate([p["ok"] for p in parts])
    total = len(ok)
    dropped = int(total - np.count_nonzero(ok))
    if dropped:
        logger.warning(f"Dropped {dropped} of {total} samples with fewer than 2 valid readings")
    if dropped > MAX_DROP_FRACTION * total:
        raise DatasetError(f"{dropped} of {total} samples dropped (more than half)",
                           dropped=dropped, total=total)

    traj = np.repeat(np.arange(n_trajectories), n_points)
    step = np.tile(np.arange(n_points), n_trajectories)
    truth = np.concatenate([p["points"] for p in parts])[ok]
    dataset = Dataset(
        adoa=np.concatenate([p["adoa"] for p in parts])[ok],
        mask=np.concatenate([p["mask"] for p in parts])[ok],
        ref_anchor=np.concatenate([p["ref"] for p in parts])[ok].astype(int),
        truth=truth,
        labels=truth.copy(),
        label_source=LabelSource.TRUTH,
        traj=traj[ok],
        step=step[ok],
        n_anchors=roster.n_anchors,
        dropped=dropped,
        **common,
    )
    logger.info(f"Built dataset: {len(dataset)} samples, {n_trajectories} trajectories, "
                f"sigma={sigma:.6g} rad, scenario {scenario.name}")

    if labeling is LabelSource.GEOMETRIC:
        from .geoloc import label_dataset
        dataset = label_dataset(dataset, roster, scenario.room, geo_options, jobs=jobs,
                                total_requested=total)
    return dataset


def dataset_columns(n_anchors: int) -> List[str]:
    """数据集 CSV 的固定列"""
    width = n_anchors - 1
    return (["traj", "step", "truth_x", "truth_y", "label_x", "label_y",
             "label_source", "ref_anchor"]
            + [f"adoa_{i}" for i in range(width)]
            + [f"mask_{i}" for i in range(width)])


def dataset_to_frame(dataset: Dataset) -> pd.DataFrame:
    """数据集转为表格"""
    width = dataset.n_features
    data: Dict[str, Any] = {
        "traj": dataset.traj.astype(int),
        "step": dataset.step.astype(int),
        "truth_x": dataset.truth[:, 0],
        "truth_y": dataset.truth[:, 1],
        "label_x": dataset.labels[:, 0],
        "label_y": dataset.labels[:, 1],
        "label_source": [dataset.label_source.value] * len(dataset),
        "ref_anchor": dataset.ref_anchor.astype(int),
    }
    for i in range(width):
        data[f"adoa_{i}"] = dataset.adoa[:, i]
    for i in range(width):
        data[f"mask_{i}"] = dataset.mask[:, i].astype(int)
    if dataset.audit is not None:
        data["residual_norm"] = dataset.audit["residual_norm"]
        data["converged"] = dataset.audit["converged"].astype(int)
        data["iterations"] = dataset.audit["iterations"].astype(int)
    return pd.DataFrame(data, columns=list(data.keys()))


def meta_path(path) -> str:
    """数据集旁路元信息文件路径"""
    return str(path) + ".meta.json"


def save_dataset(dataset: Dataset, path) -> str:
    """保存数据集 CSV 及旁路元信息"""
    atomic_write_frame(path, dataset_to_frame(dataset))
    atomic_write_json(meta_path(path), dataset.meta())
    logger.info(f"Saved dataset with {len(dataset)} samples to {path}")
    return str(path)


def load_dataset(path) -> Dataset:
    """读取数据集 CSV（旁路元信息可选）"""
    frame = read_frame(path)
    columns = list(frame.columns)
    n_adoa = sum(1 for c in columns if c.startswith("adoa_"))
    expected = dataset_columns(n_adoa + 1)
    if columns[:len(expected)] != expected:
        missing = [c for c in expected if c not in columns]
        raise SchemaError(f"dataset {path} does not match the expected header"
                          + (f" (missing {', '.join(missing[:3])})" if missing else ""))
    extra = columns[len(expected):]
    if extra and tuple(extra) != AUDIT_COLUMNS:
        raise SchemaError(f"dataset {path} has unexpected columns: {', '.join(extra)}")

    sources = frame["label_source"].astype(str).unique()
    if len(sources) > 1:
        raise SchemaError(f"dataset {path} mixes label sources: {', '.join(sorted(sources))}")
    label_source = LabelSource.parse(sources[0]) if len(sources) else None

    width = n_adoa
    adoa = frame[[f"adoa_{i}" for i in range(width)]].to_numpy(dtype=float).reshape(-1, width)
    mask = frame[[f"mask_{i}" for i in range(width)]].to_numpy(dtype=int).reshape(-1, width) != 0
    if np.any(mask & ((adoa <= -np.pi) | (adoa > np.pi))):
        raise SchemaError(f"dataset {path} has valid ADoA values outside (-pi, pi]")
    if np.any(~mask & (adoa != SENTINEL)):
        raise SchemaError(f"dataset {path} has masked entries without the sentinel value")

    audit = None
    if extra:
        audit = {
            "residual_norm": frame["residual_norm"].to_numpy(dtype=float),
            "converged": frame["converged"].to_numpy(dtype=int) != 0,
            "iterations": frame["iterations"].to_numpy(dtype=int),
        }

    meta: Dict[str, Any] = {}
    if Path(meta_path(path)).is_file():
        meta = dict(read_json(meta_path(path)))
    if label_source is None:
        label_source = LabelSource.parse(meta.get("label_source", "truth"))
    known = {"scenario", "fingerprint", "n_anchors", "sigma", "seed", "split",
             "label_source", "reference_rule", "n_samples", "dropped"}
    n_anchors = int(meta.get("n_anchors", width + 1))
    if n_anchors != width + 1:
        raise SchemaError(f"dataset {path} has {width} ADoA columns but metadata says "
                          f"{n_anchors} anchors")

    return Dataset(
        adoa=adoa,
        mask=mask,
        ref_anchor=frame["ref_anchor"].to_numpy(dtype=int),
        truth=frame[["truth_x", "truth_y"]].to_numpy(dtype=float).reshape(-1, 2),
        labels=frame[["label_x", "label_y"]].to_numpy(dtype=float).reshape(-1, 2),
        label_source=label_source,
        traj=frame["traj"].to_numpy(dtype=int),
        step=frame["step"].to_numpy(dtype=int),
        fingerprint=str(meta.get("fingerprint", "")),
        scenario=str(meta.get("scenario", "")),
        n_anchors=n_anchors,
        sigma=float(meta.get("sigma", 0.0)),
        seed=meta.get("seed"),
        split=str(meta.get("split", "")),
        dropped=int(meta.get("dropped", 0)),
        audit=audit,
        metadata={k: v for k, v in meta.items() if k not in known},
    )
