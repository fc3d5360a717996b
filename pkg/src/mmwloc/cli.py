# -*- coding: utf-8 -*-
"""
命令行入口
子命令：scenario-validate / dataset-gen / label / train / tune / predict / eval / experiment

退出码：0 成功；1 校验或运行错误（stderr 输出一行 `error: <code>: <message>`）；2 用法错误
命令行上的角度单位为度，文件中统一为弧度
"""

import argparse
import logging
import math
import sys
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from . import __version__
from .core.config_manager import ConfigManager
from .core.error_manager import ConfigError, DatasetError, ModelFormatError, get_error_manager
from .core.estimators import get_estimator_manager
from .core.evaluation import cdf_frame, euclidean_error, summarize
from .core.experiment_manager import (SUMMARY_COLUMNS, config_key, load_experiment,
                                      run_experiment, write_report)
from .core.features import (LabelSource, build_dataset, load_dataset, save_dataset,
                            trajectory_shape)
from .core.file_operations import atomic_write_frame
from .core.geoloc import label_dataset
from .core.geometry import Scenario, load_scenario
from .core.neural_network import load_model, predict, save_model, train
from .core.tuner import tune

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(verbosity: int = 0, log_file: Optional[str] = None):
    """控制台日志：默认 WARNING，-v 为 INFO，-vv 为 DEBUG"""
    root = logging.getLogger("mmwloc")
    for handler in list(root.handlers):
        if getattr(handler, "_mmwloc_cli", False):
            root.removeHandler(handler)
            handler.close()

    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter(LOG_FORMAT))
    console.setLevel(level)
    console._mmwloc_cli = True
    root.addHandler(console)
    root.setLevel(logging.DEBUG if log_file else level)

    if log_file:
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        file_handler.setLevel(logging.DEBUG)
        file_handler._mmwloc_cli = True
        root.addHandler(file_handler)
        get_error_manager().set_log_file(log_file)


def _common_parser() -> argparse.ArgumentParser:
    """所有子命令共享的选项"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-v', '--verbose', action='count', default=0,
                        help='日志详细程度（-v 为 INFO，-vv 为 DEBUG）')
    common.add_argument('--log-file', help='把日志和分类错误写入该文件')
    common.add_argument('--config', help='JSON 配置文件，命令行参数优先')
    common.add_argument('--seed', type=int, help='随机种子（默认 0）')
    common.add_argument('--jobs', type=int, help='并行任务数（默认 1，结果与并行度无关）')
    return common


def _add_training_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--node-factor', type=float, help='节点系数 k（默认 0.7）')
    parser.add_argument('--dropout', type=float, help='dropout 比例 p（默认 0.05）')
    parser.add_argument('--learning-rate', type=float, help='学习率 r（默认 0.002）')
    parser.add_argument('--max-epochs', type=int, help='最大训练轮数（默认 500）')
    parser.add_argument('--train-size', type=int, help='只使用前 N 个样本')


def build_parser() -> argparse.ArgumentParser:
    """构建参数解析器"""
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog='mmwloc',
        description='毫米波室内定位：虚拟锚点几何、ADoA 特征、浅层神经网络与几何基线',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('scenario-validate', parents=[common], help='校验场景并打印锚点数')
    p.add_argument('scenario', help='场景文件或内置场景名（rect3、rect4、lroom3）')
    p.add_argument('--coverage', action='store_true', help='逐个打印锚点及其覆盖率')

    p = sub.add_parser('dataset-gen', parents=[common], help='生成轨迹数据集')
    p.add_argument('--scenario', required=True, help='场景文件或内置场景名')
    p.add_argument('-o', '--output', required=True, help='输出 CSV 路径')
    p.add_argument('--trajectories', type=int, help='轨迹条数（默认 30）')
    p.add_argument('--points', type=int, help='每条轨迹的点数（默认 30）')
    p.add_argument('--train-size', type=int,
                   help='按样本数确定轨迹形状（优先每条 30 点），并截取前 N 个样本')
    p.add_argument('--sigma-deg', type=float, help='到达角噪声标准差（度，默认 5）')
    p.add_argument('--labeling', choices=['truth', 'geo'], help='标签来源（默认 truth）')
    p.add_argument('--split', default='', help='写入元信息的划分名（train/test）')

    p = sub.add_parser('label', parents=[common], help='用几何定位结果替换标签')
    p.add_argument('-i', '--input', required=True, help='输入数据集 CSV')
    p.add_argument('-o', '--output', required=True, help='输出数据集 CSV')
    p.add_argument('--scenario', help='场景（默认取数据集元信息中的场景名）')

    p = sub.add_parser('train', parents=[common], help='训练神经网络')
    p.add_argument('-i', '--input', required=True, help='训练数据集 CSV')
    p.add_argument('-o', '--output', required=True, help='输出模型 JSON')
    p.add_argument('--history', help='逐轮训练记录 CSV')
    _add_training_flags(p)

    p = sub.add_parser('tune', parents=[common], help='超参数网格搜索')
    p.add_argument('-i', '--input', required=True, help='训练数据集 CSV')
    p.add_argument('-o', '--output', required=True, help='最优配置 JSON（可作为 train --config）')
    p.add_argument('--model-out', help='保存最优模型 JSON')
    p.add_argument('--leaderboard', help='排行榜 CSV')
    p.add_argument('--preset', choices=['full', 'compact'], help='网格预设（默认 full）')
    _add_training_flags(p)

    p = sub.add_parser('predict', parents=[common], help='用模型预测位置')
    p.add_argument('--model', required=True, help='模型 JSON')
    p.add_argument('-i', '--input', required=True, help='数据集 CSV')
    p.add_argument('-o', '--output', required=True, help='预测结果 CSV')

    p = sub.add_parser('eval', parents=[common], help='在测试集上评估定位误差')
    p.add_argument('-i', '--input', required=True, help='测试数据集 CSV')
    p.add_argument('-o', '--output', required=True, help='误差统计 CSV（一行）')
    p.add_argument('--model', help='神经网络模型 JSON')
    p.add_argument('--algo', choices=['nn', 'geo'], default='nn', help='算法（默认 nn）')
    p.add_argument('--scenario', help='场景（默认取数据集元信息中的场景名）')
    p.add_argument('--cdf', help='误差 CDF 输出 CSV')

    p = sub.add_parser('experiment', parents=[common], help='按实验描述运行完整实验')
    p.add_argument('spec', help='实验描述 JSON 或内置实验名')
    p.add_argument('-o', '--output', required=True, help='报告输出目录')

    return parser


def build_config(args: argparse.Namespace) -> ConfigManager:
    """默认值 ← 配置文件 ← 命令行覆盖"""
    config = ConfigManager()
    if args.config:
        config.load_file(args.config)
    labeling = getattr(args, 'labeling', None)
    config.apply_overrides({
        'simulation.sigma_deg': getattr(args, 'sigma_deg', None),
        'simulation.trajectories': getattr(args, 'trajectories', None),
        'simulation.points': getattr(args, 'points', None),
        'simulation.labeling': labeling,
        'training.node_factor': getattr(args, 'node_factor', None),
        'training.dropout': getattr(args, 'dropout', None),
        'training.learning_rate': getattr(args, 'learning_rate', None),
        'training.max_epochs': getattr(args, 'max_epochs', None),
        'tuning.preset': getattr(args, 'preset', None),
        'runtime.seed': args.seed,
        'runtime.jobs': args.jobs,
    })
    return config


def _resolve_scenario(name: Optional[str], dataset=None) -> Scenario:
    """命令行给出的场景，缺省时取数据集元信息；指纹不一致时报错"""
    name = name or (dataset.scenario if dataset is not None else "")
    if not name:
        raise ConfigError("no scenario given and the dataset metadata names none; pass --scenario")
    scenario = load_scenario(name)
    if dataset is not None and dataset.fingerprint and dataset.fingerprint != scenario.fingerprint:
        raise DatasetError(f"dataset fingerprint {dataset.fingerprint} does not match scenario "
                           f"{scenario.name} ({scenario.fingerprint})")
    return scenario


def _take(dataset, n: Optional[int]):
    return dataset if n is None else dataset.take(n)


def cmd_scenario_validate(args, config: ConfigManager) -> int:
    scenario = load_scenario(args.scenario)
    roster = scenario.roster
    print(f"anchors={roster.n_anchors}")
    print(f"fingerprint={scenario.fingerprint}")
    if args.coverage:
        for anchor, coverage in zip(roster, roster.coverage):
            wall = "-" if anchor.generating_wall is None else anchor.generating_wall
            print(f"{anchor.id} {anchor.kind.value} ap={anchor.source_ap} wall={wall} "
                  f"x={anchor.position[0]:.6g} y={anchor.position[1]:.6g} coverage={coverage:.4f}")
    return 0


def cmd_dataset_gen(args, config: ConfigManager) -> int:
    scenario = load_scenario(args.scenario)
    n_traj = config.get_config('simulation.trajectories')
    n_points = config.get_config('simulation.points')
    if args.train_size is not None:
        if args.train_size <= 0:
            raise ConfigError(f"--train-size must be positive, got {args.train_size}")
        n_traj, n_points = trajectory_shape(args.train_size)

    jobs = config.get_config('runtime.jobs')
    dataset = build_dataset(scenario, n_traj, n_points, config.sigma_rad(), LabelSource.TRUTH,
                            seed=config.get_config('runtime.seed'), jobs=jobs, split=args.split,
                            **config.trajectory_options())
    if args.train_size is not None:
        dataset = dataset.take(min(args.train_size, len(dataset)))
    if LabelSource.parse(config.get_config('simulation.labeling')) is LabelSource.GEOMETRIC:
        dataset = label_dataset(dataset, scenario.roster, scenario.room, config.geo_options(), jobs)
    save_dataset(dataset, args.output)
    print(f"samples={len(dataset)} dropped={dataset.dropped}")
    return 0


def cmd_label(args, config: ConfigManager) -> int:
    dataset = load_dataset(args.input)
    scenario = _resolve_scenario(args.scenario, dataset)
    labeled = label_dataset(dataset, scenario.roster, scenario.room, config.geo_options(),
                            config.get_config('runtime.jobs'))
    save_dataset(labeled, args.output)
    errors = np.atleast_1d(euclidean_error(labeled.labels, labeled.truth))
    median = float(np.median(errors)) if len(errors) else 0.0
    print(f"samples={len(labeled)} dropped={labeled.dropped} median_label_error={median:.6g}")
    return 0


def cmd_train(args, config: ConfigManager) -> int:
    dataset = _take(load_dataset(args.input), args.train_size)
    model, history = train(dataset, config.train_config())
    save_model(model, args.output)
    if args.history:
        atomic_write_frame(args.history, pd.DataFrame({
            "epoch": history.epochs, "train_mse": history.train_mse, "val_mse": history.val_mse}))
    print(f"dims={'x'.join(str(d) for d in model.dims.as_tuple())} "
          f"best_epoch={history.best_epoch} val_mse={history.best_val_mse:.6g}")
    return 0


def cmd_tune(args, config: ConfigManager) -> int:
    dataset = _take(load_dataset(args.input), args.train_size)
    base = config.train_config()
    result = tune(dataset, config.tuning_grid(), seed=base.seed, base_config=base,
                  jobs=config.get_config('runtime.jobs'))
    config.set_train_config(result.best_config)
    config.export(args.output)
    if args.model_out:
        save_model(result.model, args.model_out)
    if args.leaderboard:
        atomic_write_frame(args.leaderboard,
                           pd.DataFrame([trial.to_dict() for trial in result.leaderboard]))
    best = result.best_config
    print(f"node_factor={best.node_factor:g} dropout={best.dropout:g} "
          f"learning_rate={best.learning_rate:.6g} val_mse={result.leaderboard[0].val_mse:.6g}")
    return 0


def _check_model_matches(model, dataset):
    if model.fingerprint and dataset.fingerprint and model.fingerprint != dataset.fingerprint:
        raise ModelFormatError(f"model was trained on roster {model.fingerprint}, "
                               f"dataset uses {dataset.fingerprint}")


def cmd_predict(args, config: ConfigManager) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.input)
    _check_model_matches(model, dataset)
    estimates = np.zeros((0, 2)) if len(dataset) == 0 else \
        np.atleast_2d(predict(model, dataset.adoa, dataset.mask))
    atomic_write_frame(args.output, pd.DataFrame({
        "traj": dataset.traj, "step": dataset.step,
        "est_x": estimates[:, 0], "est_y": estimates[:, 1],
    }))
    print(f"predictions={len(dataset)}")
    return 0


def cmd_eval(args, config: ConfigManager) -> int:
    test = load_dataset(args.input)
    scenario = _resolve_scenario(args.scenario, test)
    jobs = config.get_config('runtime.jobs')
    manager = get_estimator_manager()

    if args.algo == 'nn':
        if not args.model:
            raise ConfigError("eval with --algo nn needs --model")
        model = load_model(args.model)
        _check_model_matches(model, test)
        estimator = manager.create('nn', scenario, jobs=jobs, model=model)
        label_source = str(model.metadata.get('label_source', 'truth'))
        n_train = int(model.metadata.get('n_train', 0))
        seed = model.metadata.get('seed', config.get_config('runtime.seed'))
    else:
        estimator = manager.create('geo', scenario, jobs=jobs, options=config.geo_options())
        label_source, n_train = 'none', 0
        seed = config.get_config('runtime.seed')

    estimates = estimator.predict(test)
    errors = np.atleast_1d(euclidean_error(estimates, test.truth))
    summary = summarize(errors)
    sigma_deg = round(math.degrees(test.sigma), 9)
    row: Dict[str, Any] = {
        "config": config_key(scenario.name, sigma_deg, args.algo, label_source, n_train),
        "scenario": scenario.name, "sigma_deg": sigma_deg, "algo": args.algo,
        "label_source": label_source, "n_train": n_train,
        "seed": str(seed), "seed_median": 0, **summary.to_dict(),
    }
    atomic_write_frame(args.output, pd.DataFrame([row], columns=SUMMARY_COLUMNS))
    if args.cdf:
        atomic_write_frame(args.cdf, cdf_frame(errors))
    print(f"median={summary.median:.6g} p90={summary.p90:.6g} submeter={summary.submeter:.4f}")
    return 0


def cmd_experiment(args, config: ConfigManager) -> int:
    spec = load_experiment(args.spec)
    report = run_experiment(spec, jobs=config.get_config('runtime.jobs'))
    written = write_report(report, args.output)
    print(f"configurations={len({r.run.key for r in report.records})} "
          f"failures={len(report.failures)} files={len(written)}")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, ConfigManager], int]] = {
    'scenario-validate': cmd_scenario_validate,
    'dataset-gen': cmd_dataset_gen,
    'label': cmd_label,
    'train': cmd_train,
    'tune': cmd_tune,
    'predict': cmd_predict,
    'eval': cmd_eval,
    'experiment': cmd_experiment,
}


def dispatch(argv: Optional[List[str]] = None) -> int:
    """解析参数并执行子命令，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) if isinstance(e.code, int) or e.code is None else 2

    setup_logging(args.verbose, args.log_file)
    error_manager = get_error_manager()
    try:
        config = build_config(args)
        return COMMANDS[args.command](args, config)
    except Exception as e:
        info = error_manager.handle_exception(e, context={"command": args.command})
        logger.debug(f"{args.command} failed", exc_info=True)
        print(error_manager.format_diagnostic(info), file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == '__main__':
    main()
