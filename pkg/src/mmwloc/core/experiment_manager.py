# -*- coding: utf-8 -*-
"""
实验管理器
按实验描述执行 数据集生成 → (几何标注) → 调参/训练 → 测试评估，
输出 summary.csv、逐配置 CDF 与轨迹对照表以及 report.json

单个配置失败只记录在报告中，其余配置继续执行
"""

import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .environment_manager import get_environment_manager
from .error_manager import ConfigError, SchemaError, get_error_manager
from .estimators import get_estimator_manager
from .evaluation import SUMMARY_FIELDS, ErrorSummary, cdf_frame, euclidean_error, summarize
from .features import Dataset, LabelSource, build_dataset, trajectory_shape
from .file_operations import atomic_write_frame, atomic_write_json, read_json
from .geoloc import GeoOptions, label_dataset
from .geometry import Scenario, load_scenario
from .neural_network import TrainConfig
from .tuner import TuningGrid

logger = logging.getLogger(__name__)

# 测试集种子偏移，保证与训练集随机流不相交
TEST_SEED_OFFSET = 1_000_000

SUMMARY_COLUMNS = ["config", "scenario", "sigma_deg", "algo", "label_source", "n_train",
                   "seed", "seed_median"] + list(SUMMARY_FIELDS)


def format_sigma(sigma_deg: float) -> str:
    """配置键中的噪声写法：整数去掉小数点，其余把 . 换成 p"""
    if float(sigma_deg).is_integer():
        return str(int(sigma_deg))
    return f"{sigma_deg:g}".replace(".", "p")


def config_key(scenario: str, sigma_deg: float, algo: str, label_source: str, n_train: int) -> str:
    return f"{scenario}_s{format_sigma(sigma_deg)}_{algo}_{label_source}_n{n_train}"


def holdout_seed(seed: int) -> int:
    return seed + TEST_SEED_OFFSET


@dataclass(frozen=True)
class RunConfig:
    """实验中的一个配置"""
    scenario: str
    sigma_deg: float
    algo: str
    label_source: str
    n_train: int

    @property
    def key(self) -> str:
        return config_key(self.scenario, self.sigma_deg, self.algo, self.label_source, self.n_train)


@dataclass
class ExperimentSpec:
    """实验描述"""
    name: str = "experiment"
    scenarios: Tuple[str, ...] = ("lroom3",)
    sigmas_deg: Tuple[float, ...] = (5.0,)
    algorithms: Tuple[str, ...] = ("nn", "geo")
    label_sources: Tuple[str, ...] = ("truth", "geometric")
    train_sizes: Tuple[int, ...] = (900,)
    test_trajectories: int = 30
    test_points: int = 30
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    tuning: str = "none"
    trajectory_index: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    geoloc: GeoOptions = field(default_factory=GeoOptions)
    trajectory: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        manager = get_estimator_manager()
        for algo in self.algorithms:
            if not manager.is_supported(algo):
                raise ConfigError(f"unknown algorithm '{algo}' in experiment {self.name}")
        try:
            sources = tuple(LabelSource.parse(s).value for s in self.label_sources)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.label_sources = sources
        if self.tuning not in ("none", "compact", "full"):
            raise ConfigError(f"tuning must be one of none, compact, full; got '{self.tuning}'")
        if any(n <= 0 for n in self.train_sizes):
            raise ConfigError("train sizes must be positive")
        if not self.seeds and self.algorithms:
            raise ConfigError("experiment needs at least one seed")

    def configurations(self) -> List[RunConfig]:
        """展开全部配置，按配置键排序"""
        runs = []
        for scenario in self.scenarios:
            for sigma in self.sigmas_deg:
                for algo in self.algorithms:
                    if algo == "geo":
                        runs.append(RunConfig(scenario, float(sigma), "geo", "none", 0))
                        continue
                    for source in self.label_sources:
                        for n_train in self.train_sizes:
                            runs.append(RunConfig(scenario, float(sigma), algo, source, int(n_train)))
        return sorted(runs, key=lambda r: r.key)

    def tuning_grid(self) -> Optional[TuningGrid]:
        if self.tuning == "none":
            return None
        return TuningGrid.preset(self.tuning)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "scenarios": list(self.scenarios),
            "sigmas_deg": list(self.sigmas_deg),
            "algorithms": list(self.algorithms),
            "label_sources": list(self.label_sources),
            "train_sizes": list(self.train_sizes),
            "test_trajectories": self.test_trajectories,
            "test_points": self.test_points,
            "seeds": list(self.seeds),
            "tuning": self.tuning,
            "trajectory_index": self.trajectory_index,
            "train": self.train.to_dict(),
            "geoloc": self.geoloc.to_dict(),
            "trajectory": dict(self.trajectory),
        }


def spec_from_dict(data: Dict[str, Any], name: str = "experiment") -> ExperimentSpec:
    """由字典构建实验描述"""
    if not isinstance(data, dict):
        raise SchemaError("experiment description must be a JSON object")
    try:
        scenarios = data.get("scenarios", data.get("scenario", "lroom3"))
        if isinstance(scenarios, str):
            scenarios = [scenarios]
        train_cfg = TrainConfig(**data.get("train", {}))
        geo_cfg = GeoOptions(**data.get("geoloc", {}))
        return ExperimentSpec(
            name=str(data.get("name", name)),
            scenarios=tuple(str(s) for s in scenarios),
            sigmas_deg=tuple(float(s) for s in data.get("sigmas_deg", [5.0])),
            algorithms=tuple(str(a) for a in data.get("algorithms", ["nn", "geo"])),
            label_sources=tuple(str(s) for s in data.get("label_sources", ["truth", "geometric"])),
            train_sizes=tuple(int(n) for n in data.get("train_sizes", [900])),
            test_trajectories=int(data.get("test_trajectories", 30)),
            test_points=int(data.get("test_points", 30)),
            seeds=tuple(int(s) for s in data.get("seeds", [0, 1, 2, 3, 4])),
            tuning=str(data.get("tuning", "none")),
            trajectory_index=int(data.get("trajectory_index", 0)),
            train=train_cfg,
            geoloc=geo_cfg,
            trajectory={k: int(v) for k, v in data.get("trajectory", {}).items()},
        )
    except (TypeError, ValueError) as e:
        raise SchemaError(f"invalid experiment description: {e}") from e


def load_experiment(name_or_path: str) -> ExperimentSpec:
    """加载实验描述文件（或内置实验名）"""
    path = get_environment_manager().resolve_experiment(str(name_or_path))
    try:
        data = read_json(path)
    except ValueError as e:
        raise SchemaError(f"experiment file {path} is not valid JSON: {e}") from e
    return spec_from_dict(data, name=os.path.splitext(os.path.basename(path))[0])


@dataclass
class RunRecord:
    """单个 (配置, 种子) 的评估结果"""
    run: RunConfig
    seed: int
    summary: ErrorSummary
    estimates: np.ndarray
    test: Dataset


@dataclass
class ExperimentReport:
    """实验报告"""
    spec: ExperimentSpec
    records: List[RunRecord] = field(default_factory=list)
    failures: List[Dict[str, Any]] = field(default_factory=list)
    scenarios: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def records_for(self, key: str) -> List[RunRecord]:
        return [r for r in self.records if r.run.key == key]

    def seed_median(self, key: str, stat: str = "median") -> float:
        """某配置在各种子上的统计量中位数"""
        values = [getattr(r.summary, stat) for r in self.records_for(key)]
        return float(np.median(values)) if values else math.nan

    def summary_frame(self) -> pd.DataFrame:
        """逐种子行加上种子中位数行，按配置键排序"""
        rows: List[Dict[str, Any]] = []
        keys = sorted({r.run.key for r in self.records})
        for key in keys:
            records = sorted(self.records_for(key), key=lambda r: r.seed)
            run = records[0].run
            base = {"config": key, "scenario": run.scenario, "sigma_deg": run.sigma_deg,
                    "algo": run.algo, "label_source": run.label_source, "n_train": run.n_train}
            for r in records:
                rows.append({**base, "seed": str(r.seed), "seed_median": 0, **r.summary.to_dict()})
            median_row = {**base, "seed": "median", "seed_median": 1}
            for name in SUMMARY_FIELDS:
                median_row[name] = float(np.median([getattr(r.summary, name) for r in records]))
            median_row["n"] = int(median_row["n"])
            rows.append(median_row)
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "scenarios": self.scenarios,
            "configurations": sorted({r.run.key for r in self.records}),
            "failures": self.failures,
        }


class ExperimentRunner:
    """实验执行器：缓存同一种子下共享的数据集"""

    def __init__(self, spec: ExperimentSpec, jobs: int = 1):
        self.spec = spec
        self.jobs = jobs
        self.error_manager = get_error_manager()
        self._scenarios: Dict[str, Scenario] = {}
        self._datasets: Dict[Tuple, Dataset] = {}

    def scenario(self, name: str) -> Scenario:
        if name not in self._scenarios:
            self._scenarios[name] = load_scenario(name)
        return self._scenarios[name]

    def test_dataset(self, run: RunConfig, seed: int) -> Dataset:
        key = ("test", run.scenario, run.sigma_deg, seed)
        if key not in self._datasets:
            self._datasets[key] = build_dataset(
                self.scenario(run.scenario), self.spec.test_trajectories, self.spec.test_points,
                math.radians(run.sigma_deg), LabelSource.TRUTH, seed=holdout_seed(seed),
                jobs=self.jobs, split="test", **self.spec.trajectory)
        return self._datasets[key]

    def train_dataset(self, run: RunConfig, seed: int) -> Dataset:
        key = ("train", run.scenario, run.sigma_deg, run.n_train, run.label_source, seed)
        if key in self._datasets:
            return self._datasets[key]
        truth_key = ("train", run.scenario, run.sigma_deg, run.n_train, "truth", seed)
        if truth_key not in self._datasets:
            n_traj, n_points = trajectory_shape(run.n_train)
            dataset = build_dataset(
                self.scenario(run.scenario), n_traj, n_points, math.radians(run.sigma_deg),
                LabelSource.TRUTH, seed=seed, jobs=self.jobs, split="train", **self.spec.trajectory)
            self._datasets[truth_key] = dataset.take(min(run.n_train, len(dataset)))
        dataset = self._datasets[truth_key]
        if run.label_source == LabelSource.GEOMETRIC.value:
            scenario = self.scenario(run.scenario)
            dataset = label_dataset(dataset, scenario.roster, scenario.room, self.spec.geoloc,
                                    jobs=self.jobs)
            self._datasets[key] = dataset
        return dataset

    def evaluate(self, run: RunConfig, seed: int) -> RunRecord:
        scenario = self.scenario(run.scenario)
        test = self.test_dataset(run, seed)
        manager = get_estimator_manager()
        if run.algo == "nn":
            estimator = manager.create("nn", scenario, jobs=self.jobs,
                                       config=replace(self.spec.train, seed=seed),
                                       grid=self.spec.tuning_grid())
            estimator.fit(self.train_dataset(run, seed))
        else:
            estimator = manager.create(run.algo, scenario, jobs=self.jobs, options=self.spec.geoloc)
        estimates = estimator.predict(test)
        errors = euclidean_error(estimates, test.truth)
        return RunRecord(run, seed, summarize(np.atleast_1d(errors)), estimates, test)

    def run(self) -> ExperimentReport:
        report = ExperimentReport(self.spec)
        runs = self.spec.configurations()
        logger.info(f"Experiment {self.spec.name}: {len(runs)} configurations x "
                    f"{len(self.spec.seeds)} seeds")
        failed_keys = set()
        for run in runs:
            for seed in self.spec.seeds:
                if run.key in failed_keys:
                    break
                try:
                    record = self.evaluate(run, seed)
                except Exception as e:
                    info = self.error_manager.handle_exception(
                        e, context={"config": run.key, "seed": seed, "operation": "run_experiment"})
                    logger.warning(f"Configuration {run.key} failed for seed {seed}: {info.message}")
                    report.failures.append({"config": run.key, "seed": seed,
                                            "code": info.error_code, "message": info.message})
                    failed_keys.add(run.key)
                    continue
                report.records.append(record)
                logger.info(f"{run.key} seed {seed}: median {record.summary.median:.4g} m, "
                            f"sub-meter {record.summary.submeter:.1%}")
        # 失败配置的部分结果不进入报告
        report.records = [r for r in report.records if r.run.key not in failed_keys]
        if report.failures:
            logger.warning(f"{len(failed_keys)} configurations failed; error counts "
                           f"{self.error_manager.get_error_statistics()}")
        for name, scenario in self._scenarios.items():
            report.scenarios[name] = {"fingerprint": scenario.fingerprint,
                                      "n_anchors": scenario.roster.n_anchors}
        return report


def trajectory_frame(record: RunRecord, trajectory_index: int) -> pd.DataFrame:
    """某条测试轨迹的真值与估计对照"""
    test = record.test
    trajectories = np.unique(test.traj)
    if len(trajectories) == 0:
        return pd.DataFrame(columns=["traj", "step", "truth_x", "truth_y", "est_x", "est_y", "error"])
    chosen = trajectories[min(trajectory_index, len(trajectories) - 1)]
    idx = np.flatnonzero(test.traj == chosen)
    est = record.estimates[idx]
    return pd.DataFrame({
        "traj": test.traj[idx],
        "step": test.step[idx],
        "truth_x": test.truth[idx, 0],
        "truth_y": test.truth[idx, 1],
        "est_x": est[:, 0],
        "est_y": est[:, 1],
        "error": np.atleast_1d(euclidean_error(est, test.truth[idx])),
    })


def write_report(report: ExperimentReport, out_dir: str) -> List[str]:
    """写出报告目录，返回写入的文件列表"""
    os.makedirs(out_dir, exist_ok=True)
    written = [atomic_write_frame(os.path.join(out_dir, "summary.csv"), report.summary_frame())]
    for key in sorted({r.run.key for r in report.records}):
        records = sorted(report.records_for(key), key=lambda r: r.seed)
        pooled = np.concatenate([r.summary.errors for r in records])
        written.append(atomic_write_frame(os.path.join(out_dir, f"cdf_{key}.csv"), cdf_frame(pooled)))
        written.append(atomic_write_frame(os.path.join(out_dir, f"trajectory_{key}.csv"),
                                          trajectory_frame(records[0], report.spec.trajectory_index)))
    written.append(atomic_write_json(os.path.join(out_dir, "report.json"), report.to_dict()))
    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> ExperimentReport:
    """执行实验"""
    return ExperimentRunner(spec, jobs).run()
