# -*- coding: utf-8 -*-
"""
浅层回归网络
两层 ReLU 隐藏层加线性输出层，手写反向传播、Adam 优化器、dropout 与早停训练

层 i 的权重矩阵形状为 (n_{i-1}, n_i)，批数据按行排列
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .angle_utils import wrap_angle
from .error_manager import (DatasetError, ModelFormatError, StaleCacheError,
                            TrainingError)
from .features import REFERENCE_RULE, SENTINEL, Dataset, FeatureVector
from .file_operations import atomic_write_json, read_json

logger = logging.getLogger(__name__)

# 2: 增加 wrap_center / label_mean / label_scale；读取 1 版文件时取默认值
MODEL_FORMAT_VERSION = 2

# 截断位置搜索：5° 一格，5 格滑动窗口
CUT_BINS = 72
CUT_WINDOW = 5

# Adam 默认参数
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# 标准差低于该值的输入列不做缩放
STD_FLOOR = 1e-12

PARAMETER_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass(frozen=True)
class LayerDims:
    """各层神经元数"""
    n_input: int
    n_hidden1: int
    n_hidden2: int
    n_output: int = 2

    def __post_init__(self):
        for name in ("n_input", "n_hidden1", "n_hidden2", "n_output"):
            if int(getattr(self, name)) <= 0:
                raise ModelFormatError(f"layer size {name} must be positive, got {getattr(self, name)}")

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.n_input, self.n_hidden1, self.n_hidden2, self.n_output)

    @property
    def parameter_shapes(self) -> Tuple[Tuple[int, ...], ...]:
        d = self.as_tuple()
        return ((d[0], d[1]), (d[1],), (d[1], d[2]), (d[2],), (d[2], d[3]), (d[3],))


def layer_sizes(n_anchors: int, node_factor: float) -> LayerDims:
    """
    由锚点数和节点系数确定网络结构

    n_input = N_a - 1, n_hidden1 = ceil(k * n_input), n_hidden2 = ceil(n_hidden1 / 2)
    """
    if n_anchors < 3:
        raise ValueError(f"need at least 3 anchors for a 2D model, got {n_anchors}")
    if not 0.0 < node_factor <= 1.0:
        raise ValueError(f"node factor must lie in (0, 1], got {node_factor}")
    n_input = n_anchors - 1
    # 先舍入再取整，避免 10 * 0.7 = 7.000000000000001 之类的误差
    n_hidden1 = math.ceil(round(n_input * node_factor, 9))
    n_hidden2 = math.ceil(n_hidden1 / 2)
    return LayerDims(n_input, n_hidden1, n_hidden2, 2)


@dataclass(frozen=True)
class TrainConfig:
    """训练超参数"""
    node_factor: float = 0.7
    dropout: float = 0.05
    learning_rate: float = 0.002
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 25
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.node_factor <= 1.0:
            raise ValueError(f"node_factor must lie in (0, 1], got {self.node_factor}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.learning_rate > 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "node_factor": self.node_factor,
            "dropout": self.dropout,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "val_fraction": self.val_fraction,
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class Model:
    """
    网络参数与输入/输出标准化统计量

    输入先绕 wrap_center 重新包裹再标准化，输出层结果乘 label_scale 加 label_mean；
    三者缺省时分别为 0、0、1，此时与不做处理等价
    """
    dims: LayerDims
    weights: Tuple[np.ndarray, np.ndarray, np.ndarray]
    biases: Tuple[np.ndarray, np.ndarray, np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray
    node_factor: float = 0.7
    fingerprint: str = ""
    reference_rule: str = REFERENCE_RULE
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)
    wrap_center: Optional[np.ndarray] = None
    label_mean: Optional[np.ndarray] = None
    label_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        defaults = (("wrap_center", self.dims.n_input, 0.0),
                    ("label_mean", self.dims.n_output, 0.0),
                    ("label_scale", self.dims.n_output, 1.0))
        for name, size, fill in defaults:
            value = getattr(self, name)
            value = np.full(size, fill) if value is None else np.asarray(value, dtype=float)
            object.__setattr__(self, name, value)
            if np.shape(value) != (size,):
                raise ModelFormatError(f"{name} has shape {np.shape(value)}, expected ({size},)")
            if not np.all(np.isfinite(value)):
                raise ModelFormatError(f"{name} contains non-finite values")
        if np.any(self.label_scale <= 0):
            raise ModelFormatError("label scale entries must be positive")
        shapes = self.dims.parameter_shapes
        for name, array, shape in zip(PARAMETER_NAMES, self.parameters, shapes):
            if np.shape(array) != shape:
                raise ModelFormatError(f"parameter {name} has shape {np.shape(array)}, expected {shape}")
            if not np.all(np.isfinite(array)):
                raise ModelFormatError(f"parameter {name} contains non-finite values")
        for name, stat in (("norm_mean", self.norm_mean), ("norm_std", self.norm_std)):
            if np.shape(stat) != (self.dims.n_input,):
                raise ModelFormatError(f"{name} has shape {np.shape(stat)}, expected ({self.dims.n_input},)")
            if not np.all(np.isfinite(stat)):
                raise ModelFormatError(f"{name} contains non-finite values")
        if np.any(self.norm_std <= 0):
            raise ModelFormatError("normalization std entries must be positive")

    @property
    def parameters(self) -> List[np.ndarray]:
        """按 W1, b1, W2, b2, W3, b3 顺序的参数列表"""
        return [self.weights[0], self.biases[0], self.weights[1], self.biases[1],
                self.weights[2], self.biases[2]]

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Model":
        p = list(params)
        return replace(self, weights=(p[0], p[2], p[4]), biases=(p[1], p[3], p[5]))

    @property
    def n_parameters(self) -> int:
        return count_parameters(self.dims)


def count_parameters(dims: Union[LayerDims, Model]) -> int:
    """可训练参数个数"""
    if isinstance(dims, Model):
        dims = dims.dims
    return int(sum(np.prod(shape) for shape in dims.parameter_shapes))


def init_model(dims: LayerDims, rng: np.random.Generator, node_factor: float = 0.7,
               norm_mean: Optional[np.ndarray] = None, norm_std: Optional[np.ndarray] = None,
               fingerprint: str = "", **stats: Optional[np.ndarray]) -> Model:
    """He 初始化（std = sqrt(2 / fan_in)），偏置置零；stats 可给出 wrap_center、label_mean、label_scale"""
    d = dims.as_tuple()
    weights = tuple(
        rng.normal(0.0, math.sqrt(2.0 / d[i]), size=(d[i], d[i + 1])) for i in range(3)
    )
    biases = tuple(np.zeros(d[i + 1]) for i in range(3))
    return Model(
        dims=dims,
        weights=weights,
        biases=biases,
        norm_mean=np.zeros(d[0]) if norm_mean is None else np.asarray(norm_mean, dtype=float),
        norm_std=np.ones(d[0]) if norm_std is None else np.asarray(norm_std, dtype=float),
        node_factor=node_factor,
        fingerprint=fingerprint,
        **stats,
    )


def zero_model(dims: LayerDims) -> Model:
    """全零参数模型"""
    d = dims.as_tuple()
    return Model(
        dims=dims,
        weights=tuple(np.zeros((d[i], d[i + 1])) for i in range(3)),
        biases=tuple(np.zeros(d[i + 1]) for i in range(3)),
        norm_mean=np.zeros(d[0]),
        norm_std=np.ones(d[0]),
    )


def fit_wrap_centers(features: np.ndarray, mask: np.ndarray, bins: int = CUT_BINS,
                     window: int = CUT_WINDOW) -> np.ndarray:
    """
    为每列选择重新包裹的中心角

    ADoA 在某个方向上必有一处 ±π 跳变。取训练集有效值在圆周上（滑动窗口内）
    最稀疏的角度作为跳变位置，中心角与其相对；并列时取离已占用格最远的格，
    再并列时取离 ±π 最近的格。
    没有有效条目的列中心为 0
    """
    X = np.asarray(features, dtype=float)
    M = np.asarray(mask, dtype=bool)
    edges = np.linspace(-np.pi, np.pi, bins + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    half = window // 2
    kernel = np.ones(2 * half + 1)
    centers = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        values = X[M[:, j], j]
        if values.size == 0:
            continue
        counts, _ = np.histogram(values, bins=edges)
        # 圆周上首尾相接
        padded = np.concatenate([counts[bins - half:], counts, counts[:half]])
        smooth = np.convolve(padded, kernel, mode="valid")
        gap = np.abs(np.arange(bins)[:, None] - np.flatnonzero(counts)[None, :])
        gap = np.minimum(gap, bins - gap).min(axis=1)
        best = np.lexsort((np.pi - np.abs(mids), -gap, smooth))[0]
        centers[j] = wrap_angle(mids[best] + np.pi)
    return centers


def recenter(features: np.ndarray, center: Optional[np.ndarray]) -> np.ndarray:
    """wrap(x - center)；中心为 0 的列在 (-π, π] 内原样保留"""
    X = np.asarray(features, dtype=float)
    if center is None:
        return X
    return np.asarray(wrap_angle(X - center), dtype=float)


def fit_normalization(features: np.ndarray, mask: np.ndarray,
                      center: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """按列计算有效条目（绕 center 重新包裹后）的均值和标准差；没有有效条目的列取 (0, 1)"""
    X = recenter(features, center)
    M = np.asarray(mask, dtype=bool)
    counts = M.sum(axis=0)
    safe = np.maximum(counts, 1)
    mean = np.where(M, X, 0.0).sum(axis=0) / safe
    var = np.where(M, (X - mean) ** 2, 0.0).sum(axis=0) / safe
    std = np.sqrt(var)
    mean = np.where(counts > 0, mean, 0.0)
    std = np.where((counts > 0) & (std > STD_FLOOR), std, 1.0)
    return mean, std


def fit_label_scaling(labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """标签逐坐标的均值与标准差，标准差过小时取 1"""
    Y = np.atleast_2d(np.asarray(labels, dtype=float))
    mean = Y.mean(axis=0)
    std = Y.std(axis=0)
    return mean, np.where(std > STD_FLOOR, std, 1.0)


def _as_batch(model: Model, features, mask) -> Tuple[np.ndarray, np.ndarray, bool]:
    """统一输入为 (n, n_input) 批数据"""
    if isinstance(features, FeatureVector):
        mask = features.mask if mask is None else mask
        features = features.adoa
    X = np.asarray(features, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.dims.n_input:
        raise ModelFormatError(
            f"feature length {X.shape[1]} does not match model input size {model.dims.n_input}")
    if not np.all(np.isfinite(X)):
        raise ModelFormatError("features contain non-finite values")
    if mask is None:
        M = X != SENTINEL
    else:
        M = np.atleast_2d(np.asarray(mask, dtype=bool))
        if M.shape != X.shape:
            raise ModelFormatError(f"mask shape {M.shape} does not match features {X.shape}")
    return X, M, single


def normalize(model: Model, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """绕模型中心角重新包裹后用训练集统计量标准化；占位条目保持为 -10"""
    shifted = recenter(features, model.wrap_center)
    return np.where(mask, (shifted - model.norm_mean) / model.norm_std, SENTINEL)


@dataclass
class ForwardCache:
    """前向传播缓存，供反向传播使用"""
    inputs: np.ndarray
    pre1: np.ndarray
    drop1: np.ndarray
    hidden1: np.ndarray
    pre2: np.ndarray
    drop2: np.ndarray
    hidden2: np.ndarray
    output: np.ndarray
    shapes: Tuple[Tuple[int, ...], ...]


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _dropout_mask(shape, p: float, rng: Optional[np.random.Generator]) -> np.ndarray:
    """倒置 dropout 掩码：保留单元缩放 1/(1-p)"""
    if p <= 0.0:
        return np.ones(shape)
    if rng is None:
        raise ValueError("train mode with dropout needs a random generator")
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def forward(model: Model, features, mask=None, train: bool = False,
            dropout: float = 0.0, rng: Optional[np.random.Generator] = None
            ) -> Tuple[np.ndarray, ForwardCache]:
    """
    前向传播

    Args:
        model: 网络模型
        features: FeatureVector、单个特征数组或 (n, n_input) 批数据
        mask: 有效掩码，缺省时按占位值推断
        train: 训练模式下对隐藏层施加 dropout
        dropout: dropout 比例 p
        rng: dropout 随机数发生器

    Returns:
        (位置估计, 缓存)；单个输入返回形状 (2,)
    """
    X, M, single = _as_batch(model, features, mask)
    W1, W2, W3 = model.weights
    b1, b2, b3 = model.biases
    p = dropout if train else 0.0

    z0 = normalize(model, X, M)
    a1 = z0 @ W1 + b1
    d1 = _dropout_mask(a1.shape, p, rng)
    h1 = _relu(a1) * d1
    a2 = h1 @ W2 + b2
    d2 = _dropout_mask(a2.shape, p, rng)
    h2 = _relu(a2) * d2
    out = (h2 @ W3 + b3) * model.label_scale + model.label_mean

    cache = ForwardCache(z0, a1, d1, h1, a2, d2, h2, out,
                         tuple(np.shape(x) for x in model.parameters))
    return (out[0] if single else out), cache


def mse_loss(truth, estimate) -> Union[float, np.ndarray]:
    """平方误差 |x1 - x̂1|² + |x2 - x̂2|²；批输入逐行返回"""
    diff = np.asarray(truth, dtype=float) - np.asarray(estimate, dtype=float)
    loss = np.sum(diff ** 2, axis=-1)
    return float(loss) if np.ndim(loss) == 0 else loss


def backward(model: Model, cache: ForwardCache, truth) -> List[np.ndarray]:
    """
    批平均平方误差对各参数的梯度

    返回顺序与 Model.parameters 一致；ReLU 在 0 处的次梯度取 0
    """
    shapes = tuple(np.shape(x) for x in model.parameters)
    if shapes != cache.shapes:
        raise StaleCacheError("forward cache was produced by a model with different shapes")
    Y = np.atleast_2d(np.asarray(truth, dtype=float))
    if Y.shape != cache.output.shape:
        raise StaleCacheError(f"truth shape {Y.shape} does not match cached output {cache.output.shape}")

    W1, W2, W3 = model.weights
    n = Y.shape[0]

    d_out = 2.0 * (cache.output - Y) / n * model.label_scale
    gW3 = cache.hidden2.T @ d_out
    gb3 = d_out.sum(axis=0)

    d_h2 = d_out @ W3.T
    d_a2 = d_h2 * cache.drop2 * (cache.pre2 > 0)
    gW2 = cache.hidden1.T @ d_a2
    gb2 = d_a2.sum(axis=0)

    d_h1 = d_a2 @ W2.T
    d_a1 = d_h1 * cache.drop1 * (cache.pre1 > 0)
    gW1 = cache.inputs.T @ d_a1
    gb1 = d_a1.sum(axis=0)

    return [gW1, gb1, gW2, gb2, gW3, gb3]


@dataclass
class AdamState:
    """Adam 一阶、二阶矩估计与步数"""
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(state: AdamState, model: Union[Model, Sequence[np.ndarray]], gradients: Sequence[np.ndarray],
              learning_rate: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPSILON):
    """
    一步 Adam 更新（带偏差修正）

    model 可以是 Model 或参数数组列表；返回同类型的新参数和新状态，输入不被修改
    """
    params = model.parameters if isinstance(model, Model) else list(model)
    if len(params) != len(gradients) or len(state.m) != len(params):
        raise StaleCacheError("optimizer state does not match the model parameters")
    for p, g, m in zip(params, gradients, state.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise StaleCacheError("optimizer state does not match the model parameters")
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient encountered", step=state.step + 1)

    t = state.step + 1
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, gradients, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        new_params.append(p - learning_rate * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)

    new_state = AdamState(new_m, new_v, t)
    if isinstance(model, Model):
        return model.with_parameters(new_params), new_state
    return new_params, new_state


def predict(model: Model, features, mask=None) -> np.ndarray:
    """推理模式的位置估计，批输入保持顺序"""
    estimate, _ = forward(model, features, mask, train=False)
    return estimate


@dataclass
class TrainHistory:
    """逐轮训练记录"""
    epochs: List[int] = field(default_factory=list)
    train_mse: List[float] = field(default_factory=list)
    val_mse: List[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def append(self, epoch: int, train_mse: float, val_mse: float):
        self.epochs.append(epoch)
        self.train_mse.append(train_mse)
        self.val_mse.append(val_mse)

    @property
    def best_val_mse(self) -> float:
        if not self.val_mse:
            return math.inf
        return self.val_mse[self.best_epoch - 1]

    def __len__(self) -> int:
        return len(self.epochs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epochs": list(self.epochs),
            "train_mse": list(self.train_mse),
            "val_mse": list(self.val_mse),
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }


def split_indices(dataset: Dataset, val_fraction: float,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    划分训练/验证集

    轨迹数足够时按整条轨迹划分，否则退回到按样本划分；返回升序索引
    """
    n = len(dataset)
    if n < 2:
        raise TrainingError(f"cannot split {n} samples into train and validation sets")
    trajectories = np.unique(dataset.traj)
    if len(trajectories) >= 2:
        n_val = min(max(1, int(round(val_fraction * len(trajectories)))), len(trajectories) - 1)
        val_traj = rng.permutation(trajectories)[:n_val]
        is_val = np.isin(dataset.traj, val_traj)
    else:
        n_val = min(max(1, int(round(val_fraction * n))), n - 1)
        is_val = np.zeros(n, dtype=bool)
        is_val[rng.permutation(n)[:n_val]] = True
    train_idx = np.flatnonzero(~is_val)
    val_idx = np.flatnonzero(is_val)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise TrainingError("empty train or validation split")
    return train_idx, val_idx


def _dataset_mse(model: Model, X: np.ndarray, M: np.ndarray, Y: np.ndarray) -> float:
    estimate, _ = forward(model, X, M, train=False)
    return float(np.mean(mse_loss(Y, estimate)))


def train(dataset: Dataset, config: TrainConfig, fingerprint: Optional[str] = None
          ) -> Tuple[Model, TrainHistory]:
    """
    训练网络

    训练集统计量标准化输入，小批量 Adam，验证 MSE 连续 patience 轮不下降时早停，
    返回验证集最优轮次的参数；相同种子下结果逐位一致
    """
    if len(dataset) == 0:
        raise DatasetError("cannot train on an empty dataset")
    if fingerprint and dataset.fingerprint and fingerprint != dataset.fingerprint:
        raise DatasetError(f"dataset fingerprint {dataset.fingerprint} does not match {fingerprint}")

    split_ss, init_ss, loop_ss = np.random.SeedSequence(config.seed).spawn(3)
    train_idx, val_idx = split_indices(dataset, config.val_fraction, np.random.default_rng(split_ss))

    X, M, Y = dataset.adoa, dataset.mask, dataset.labels
    X_tr, M_tr, Y_tr = X[train_idx], M[train_idx], Y[train_idx]
    X_va, M_va, Y_va = X[val_idx], M[val_idx], Y[val_idx]

    dims = layer_sizes(dataset.n_anchors, config.node_factor)
    center = fit_wrap_centers(X_tr, M_tr)
    mean, std = fit_normalization(X_tr, M_tr, center)
    label_mean, label_scale = fit_label_scaling(Y_tr)
    model = init_model(dims, np.random.default_rng(init_ss), config.node_factor, mean, std,
                       fingerprint or dataset.fingerprint, wrap_center=center,
                       label_mean=label_mean, label_scale=label_scale)
    state = AdamState.zeros_like(model.parameters)
    rng = np.random.default_rng(loop_ss)

    history = TrainHistory()
    best_model, best_val = model, math.inf
    since_best = 0
    n_train = len(train_idx)
    logger.info(f"Training {dims.as_tuple()} on {n_train} samples ({len(val_idx)} validation), "
                f"p={config.dropout}, r={config.learning_rate}")

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_train)
        for start in range(0, n_train, config.batch_size):
            batch = order[start:start + config.batch_size]
            _, cache = forward(model, X_tr[batch], M_tr[batch], train=True,
                               dropout=config.dropout, rng=rng)
            grads = backward(model, cache, Y_tr[batch])
            model, state = adam_step(state, model, grads, config.learning_rate)

        train_mse = _dataset_mse(model, X_tr, M_tr, Y_tr)
        val_mse = _dataset_mse(model, X_va, M_va, Y_va)
        if not (math.isfinite(train_mse) and math.isfinite(val_mse)):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        history.append(epoch, train_mse, val_mse)
        logger.debug(f"epoch {epoch}: train {train_mse:.6g}, val {val_mse:.6g}")

        if val_mse < best_val:
            best_val, best_model = val_mse, model
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                history.stopped_early = True
                break

    best_model = replace(best_model, metadata={
        "sigma": dataset.sigma,
        "label_source": dataset.label_source.value,
        "seed": config.seed,
        "n_train": len(dataset),
        "best_epoch": history.best_epoch,
        "epochs_run": len(history),
        "val_mse": best_val,
        "train_config": config.to_dict(),
    })
    logger.info(f"Training finished after {len(history)} epochs, best epoch "
                f"{history.best_epoch} with validation MSE {best_val:.6g}")
    return best_model, history


def model_to_dict(model: Model) -> Dict[str, Any]:
    """模型序列化字典，浮点按 repr 输出以保证精确往返"""
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "dims": list(model.dims.as_tuple()),
        "node_factor": model.node_factor,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "norm_mean": model.norm_mean.tolist(),
        "norm_std": model.norm_std.tolist(),
        "wrap_center": model.wrap_center.tolist(),
        "label_mean": model.label_mean.tolist(),
        "label_scale": model.label_scale.tolist(),
        "fingerprint": model.fingerprint,
        "reference_rule": model.reference_rule,
        "metadata": model.metadata,
    }


def model_from_dict(data: Dict[str, Any]) -> Model:
    """由字典恢复模型并校验形状与取值"""
    try:
        dims = LayerDims(*[int(x) for x in data["dims"]])
        weights = tuple(np.asarray(w, dtype=float).reshape(shape) for w, shape in
                        zip(data["weights"], dims.parameter_shapes[0::2]))
        biases = tuple(np.asarray(b, dtype=float).reshape(shape) for b, shape in
                       zip(data["biases"], dims.parameter_shapes[1::2]))
        if len(weights) != 3 or len(biases) != 3:
            raise ModelFormatError("model must have exactly 3 weight matrices and 3 bias vectors")
        return Model(
            dims=dims,
            weights=weights,
            biases=biases,
            norm_mean=np.asarray(data["norm_mean"], dtype=float),
            norm_std=np.asarray(data["norm_std"], dtype=float),
            node_factor=float(data.get("node_factor", 0.7)),
            fingerprint=str(data.get("fingerprint", "")),
            reference_rule=str(data.get("reference_rule", REFERENCE_RULE)),
            metadata=dict(data.get("metadata", {})),
            wrap_center=data.get("wrap_center"),
            label_mean=data.get("label_mean"),
            label_scale=data.get("label_scale"),
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFormatError(f"invalid model description: {e}") from e


def save_model(model: Model, path) -> str:
    """保存模型 JSON"""
    atomic_write_json(path, model_to_dict(model))
    logger.info(f"Saved model {model.dims.as_tuple()} to {path}")
    return str(path)


def load_model(path) -> Model:
    """读取模型 JSON"""
    try:
        data = read_json(path)
    except ValueError as e:
        raise ModelFormatError(f"model file {path} is not valid JSON: {e}") from e
    model = model_from_dict(data)
    if model.reference_rule != REFERENCE_RULE:
        raise ModelFormatError(f"unsupported reference rule '{model.reference_rule}'")
    return model
