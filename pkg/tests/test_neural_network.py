# -*- coding: utf-8 -*-
"""浅层回归网络：结构、前向/反向传播、Adam、训练与模型文件"""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from mmwloc.core.error_manager import (DatasetError, ModelFormatError, StaleCacheError,
                                       TrainingError)
from mmwloc.core.evaluation import euclidean_error
from mmwloc.core.features import Dataset, LabelSource, build_dataset
from mmwloc.core.neural_network import (AdamState, LayerDims, Model, TrainConfig, adam_step,
                                        backward, count_parameters, fit_normalization, fit_wrap_centers,
                                        forward, init_model, layer_sizes, load_model,
                                        model_to_dict, mse_loss, predict, recenter, save_model,
                                        split_indices, train, zero_model)


def random_model(rng, dims=LayerDims(4, 3, 2, 2)) -> Model:
    model = init_model(dims, rng)
    # 非零偏置，避免所有 ReLU 处在同一侧
    biases = tuple(rng.normal(0, 0.3, size=b.shape) for b in model.biases)
    return replace(model, biases=biases)


def batch_loss(model, X, Y) -> float:
    out, _ = forward(model, X, np.ones_like(X, dtype=bool))
    return float(np.mean(mse_loss(Y, out)))


def repeated_dataset(features: np.ndarray, label, copies: int, n_traj: int) -> Dataset:
    n = copies
    adoa = np.tile(features, (n, 1))
    labels = np.tile(np.asarray(label, dtype=float), (n, 1))
    return Dataset(
        adoa=adoa, mask=np.ones_like(adoa, dtype=bool), ref_anchor=np.zeros(n, dtype=int),
        truth=labels.copy(), labels=labels, label_source=LabelSource.TRUTH,
        traj=np.repeat(np.arange(n_traj), n // n_traj), step=np.tile(np.arange(n // n_traj), n_traj),
    )


class TestLayerSizes:

    @pytest.mark.parametrize("n_anchors, k, dims", [
        (19, 0.7, (18, 13, 7, 2)),
        (15, 0.7, (14, 10, 5, 2)),
        (3, 0.6, (2, 2, 1, 2)),
        (11, 0.7, (10, 7, 4, 2)),
    ])
    def test_table_formulas(self, n_anchors, k, dims):
        assert layer_sizes(n_anchors, k).as_tuple() == dims

    def test_scenarios(self, rect3, lroom3):
        assert layer_sizes(lroom3.roster.n_anchors, 0.7).as_tuple() == (18, 13, 7, 2)
        assert layer_sizes(rect3.roster.n_anchors, 0.7).as_tuple() == (14, 10, 5, 2)

    def test_parameter_count(self):
        assert count_parameters(LayerDims(18, 13, 7, 2)) == 361
        assert count_parameters(LayerDims(18, 13, 7, 2)) < 1000

    def test_too_few_anchors(self):
        with pytest.raises(ValueError):
            layer_sizes(2, 0.7)


class TestForward:

    def test_zero_model(self, rng):
        model = zero_model(LayerDims(5, 4, 2, 2))
        out, _ = forward(model, rng.normal(size=5), np.ones(5, dtype=bool))
        np.testing.assert_array_equal(out, [0.0, 0.0])

    def test_hand_sized_network(self):
        dims = LayerDims(2, 2, 1, 2)
        model = Model(
            dims=dims,
            weights=(np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([[1.0], [-0.5]]),
                     np.array([[2.0, -3.0]])),
            biases=(np.array([0.1, -0.2]), np.array([0.3]), np.array([0.5, 1.0])),
            norm_mean=np.zeros(2), norm_std=np.ones(2),
        )
        a = np.array([0.4, 0.2])
        # 手算：h1 = relu(W1ᵀa + b1)，h2 = relu(W2ᵀh1 + b2)，y = W3ᵀh2 + b3
        h1 = np.maximum([0.4 * 1.0 + 0.2 * 0.5 + 0.1, 0.4 * -1.0 + 0.2 * 2.0 - 0.2], 0)
        h2 = max(h1[0] * 1.0 + h1[1] * -0.5 + 0.3, 0)
        expected = [h2 * 2.0 + 0.5, h2 * -3.0 + 1.0]
        out, _ = forward(model, a, np.ones(2, dtype=bool))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_no_dropout_train_equals_infer(self, rng):
        model = random_model(rng)
        X = rng.normal(size=(8, 4))
        M = np.ones_like(X, dtype=bool)
        train_out, _ = forward(model, X, M, train=True, dropout=0.0, rng=rng)
        infer_out, _ = forward(model, X, M)
        np.testing.assert_array_equal(train_out, infer_out)

    def test_dropout_expectation(self, rng):
        model = random_model(rng, LayerDims(6, 8, 4, 2))
        x = rng.normal(size=6)
        X = np.tile(x, (10_000, 1))
        M = np.ones_like(X, dtype=bool)
        _, train_cache = forward(model, X, M, train=True, dropout=0.1,
                                 rng=np.random.default_rng(99))
        _, infer_cache = forward(model, x[None, :], M[:1])
        expected = infer_cache.hidden1[0]
        active = expected > 1e-3
        assert active.any()
        mean = train_cache.hidden1.mean(axis=0)
        np.testing.assert_allclose(mean[active], expected[active], rtol=0.02)

    def test_length_mismatch(self, rng):
        with pytest.raises(ModelFormatError):
            forward(random_model(rng), np.zeros(5))

    def test_non_finite_input(self, rng):
        with pytest.raises(ModelFormatError):
            forward(random_model(rng), np.array([0.1, np.nan, 0.2, 0.3]))

    def test_sentinel_bypasses_normalization(self, rng):
        model = replace(random_model(rng), norm_mean=np.full(4, 0.5), norm_std=np.full(4, 2.0))
        x = np.array([1.5, -10.0, 0.5, 0.5])
        _, cache = forward(model, x, np.array([True, False, True, True]))
        np.testing.assert_allclose(cache.inputs[0], [0.5, -10.0, 0.0, 0.0])

    def test_predict_batch_order(self, rng):
        model = random_model(rng)
        X = rng.normal(size=(6, 4))
        batch = predict(model, X, np.ones_like(X, dtype=bool))
        for i in range(6):
            # 单行与批量走不同的 BLAS 路径，只要求舍入误差内一致
            np.testing.assert_allclose(batch[i], predict(model, X[i], np.ones(4, dtype=bool)),
                                       rtol=1e-12, atol=1e-12)


class TestLoss:

    @pytest.mark.parametrize("truth, estimate, expected", [
        ((1, 2), (1, 2), 0.0),
        ((0, 0), (3, 4), 25.0),
        ((-1, 1), (1, -1), 8.0),
    ])
    def test_examples(self, truth, estimate, expected):
        assert mse_loss(truth, estimate) == expected

    def test_consistent_with_euclidean_error(self, rng):
        a, b = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
        np.testing.assert_allclose(mse_loss(a, b), euclidean_error(a, b) ** 2, rtol=1e-12)


class TestBackward:

    @pytest.mark.parametrize("stats", [
        {},
        {"wrap_center": np.array([0.5, -2.0, 3.0, 0.0]), "label_mean": np.array([7.0, -2.0]),
         "label_scale": np.array([2.5, 0.4])},
    ])
    def test_finite_differences(self, stats):
        rng = np.random.default_rng(0)
        h = 1e-5
        for _ in range(20):
            model = replace(random_model(rng), **stats)
            X = rng.normal(size=(5, 4))
            Y = rng.normal(size=(5, 2))
            _, cache = forward(model, X, np.ones_like(X, dtype=bool))
            grads = backward(model, cache, Y)
            params = model.parameters
            for index, (param, grad) in enumerate(zip(params, grads)):
                numeric = np.zeros_like(param)
                for pos in np.ndindex(param.shape):
                    plus = [p.copy() for p in params]
                    minus = [p.copy() for p in params]
                    plus[index][pos] += h
                    minus[index][pos] -= h
                    numeric[pos] = (batch_loss(model.with_parameters(plus), X, Y)
                                    - batch_loss(model.with_parameters(minus), X, Y)) / (2 * h)
                scale = max(np.linalg.norm(grad) + np.linalg.norm(numeric), 1e-8)
                assert np.linalg.norm(grad - numeric) / scale <= 1e-4

    def test_zero_loss_output_bias(self, rng):
        model = random_model(rng)
        X = rng.normal(size=(3, 4))
        out, cache = forward(model, X, np.ones_like(X, dtype=bool))
        grads = backward(model, cache, out)
        np.testing.assert_array_equal(grads[5], [0.0, 0.0])

    def test_dropped_units_get_no_gradient(self, rng):
        model = random_model(rng, LayerDims(4, 8, 4, 2))
        x = rng.normal(size=(1, 4))
        _, cache = forward(model, x, np.ones_like(x, dtype=bool), train=True, dropout=0.5,
                           rng=np.random.default_rng(3))
        grads = backward(model, cache, rng.normal(size=(1, 2)))
        dropped = cache.drop1[0] == 0
        assert dropped.any()
        np.testing.assert_array_equal(grads[0][:, dropped], 0.0)
        np.testing.assert_array_equal(grads[1][dropped], 0.0)

    def test_stale_cache(self, rng):
        model = random_model(rng)
        other = random_model(rng, LayerDims(4, 4, 2, 2))
        X = rng.normal(size=(2, 4))
        _, cache = forward(model, X, np.ones_like(X, dtype=bool))
        with pytest.raises(StaleCacheError):
            backward(other, cache, np.zeros((2, 2)))


class TestAdam:

    def test_zero_gradient(self, rng):
        model = random_model(rng)
        state = AdamState.zeros_like(model.parameters)
        updated, state = adam_step(state, model, [np.zeros_like(p) for p in model.parameters], 0.01)
        for before, after in zip(model.parameters, updated.parameters):
            np.testing.assert_array_equal(before, after)
        assert state.step == 1

    def test_first_step_is_sign(self, rng):
        params = [rng.normal(size=(3, 2))]
        grads = [rng.choice([-1, 1], size=(3, 2)) * rng.uniform(0.1, 5, size=(3, 2))]
        new, _ = adam_step(AdamState.zeros_like(params), params, grads, 0.01)
        np.testing.assert_allclose(new[0] - params[0], -0.01 * np.sign(grads[0]), rtol=1e-6)

    def test_least_squares(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(50, 3))
        y = X @ np.array([1.5, -2.0, 0.5]) + 0.7 + rng.normal(0, 0.1, size=50)
        A = np.column_stack([X, np.ones(50)])
        solution = np.linalg.lstsq(A, y, rcond=None)[0]

        params = [np.zeros(3), np.zeros(1)]
        state = AdamState.zeros_like(params)
        for lr, steps in ((0.01, 2000), (0.001, 2000)):
            for _ in range(steps):
                residual = X @ params[0] + params[1][0] - y
                grads = [2 * X.T @ residual / 50, np.array([2 * residual.mean()])]
                params, state = adam_step(state, params, grads, lr)
        np.testing.assert_allclose(np.concatenate(params), solution, atol=1e-3)

    def test_non_finite_gradient(self, rng):
        params = [np.zeros(2)]
        with pytest.raises(TrainingError):
            adam_step(AdamState.zeros_like(params), params, [np.array([np.inf, 0.0])], 0.01)


class TestNormalization:

    def test_valid_entries_only(self):
        X = np.array([[1.0, -10.0], [3.0, 2.0], [5.0, 2.0]])
        M = np.array([[True, False], [True, True], [True, True]])
        mean, std = fit_normalization(X, M)
        np.testing.assert_allclose(mean, [3.0, 2.0])
        # 常数列使用单位标准差
        np.testing.assert_allclose(std, [math.sqrt(8 / 3), 1.0])

    def test_validation_rows_do_not_matter(self, rect3):
        dataset = build_dataset(rect3, 10, 10, math.radians(5), seed=2)
        config = TrainConfig(max_epochs=1, seed=5)
        model, _ = train(dataset, config)

        split_ss = np.random.SeedSequence(config.seed).spawn(3)[0]
        _, val_idx = split_indices(dataset, config.val_fraction, np.random.default_rng(split_ss))
        shuffled = np.random.default_rng(0).permutation(val_idx)
        adoa, mask = dataset.adoa.copy(), dataset.mask.copy()
        adoa[val_idx], mask[val_idx] = dataset.adoa[shuffled], dataset.mask[shuffled]
        adoa[val_idx] += 0.01
        perturbed = replace(dataset, adoa=adoa, mask=mask)

        other, _ = train(perturbed, config)
        np.testing.assert_array_equal(model.norm_mean, other.norm_mean)
        np.testing.assert_array_equal(model.norm_std, other.norm_std)
        np.testing.assert_array_equal(model.wrap_center, other.wrap_center)
        np.testing.assert_array_equal(model.label_mean, other.label_mean)

    def test_wrap_center_moves_cut_into_gap(self):
        rng = np.random.default_rng(4)
        # 第一列聚在 ±π 两侧，第二列聚在 0 附近，第三列没有有效条目
        near_pi = np.where(rng.random(200) < 0.5, 1.0, -1.0) * rng.uniform(2.8, np.pi, 200)
        near_zero = rng.uniform(-0.3, 0.3, 200)
        X = np.column_stack([near_pi, near_zero, np.full(200, -10.0)])
        M = np.column_stack([np.ones(200, bool), np.ones(200, bool), np.zeros(200, bool)])
        center = fit_wrap_centers(X, M)
        assert abs(abs(center[0]) - np.pi) < 0.2
        assert abs(center[1]) < 0.1
        assert center[2] == 0.0
        shifted = recenter(X[:, :2], center[:2])
        assert np.ptp(shifted[:, 0]) < 1.0
        assert np.ptp(shifted[:, 1]) < 1.0

    def test_recentred_statistics(self):
        X = np.array([[3.0], [-3.0]])
        mean, std = fit_normalization(X, np.ones_like(X, dtype=bool), center=np.array([np.pi]))
        # 绕 π 包裹后两点相距 2π - 6
        np.testing.assert_allclose(mean, [0.0], atol=1e-12)
        np.testing.assert_allclose(std, [np.pi - 3.0])


class TestTrain:

    def test_memorizes_single_sample(self, rect3, rng):
        dataset = build_dataset(rect3, 1, 2, math.radians(5), seed=1)
        repeated = repeated_dataset(dataset.adoa[0], (1.5, 2.0), 320, 10)
        config = TrainConfig(dropout=0.0, learning_rate=0.02, max_epochs=200, patience=200)
        _, history = train(repeated, config)
        assert min(history.train_mse) < 1e-4

    def test_deterministic(self, rect3):
        dataset = build_dataset(rect3, 6, 10, math.radians(5), seed=3)
        config = TrainConfig(max_epochs=15, seed=4)
        a, ha = train(dataset, config)
        b, hb = train(dataset, config)
        assert ha.to_dict() == hb.to_dict()
        for p, q in zip(a.parameters, b.parameters):
            np.testing.assert_array_equal(p, q)

    def test_trajectory_split(self, rect3):
        dataset = build_dataset(rect3, 10, 5, 0.1, seed=3)
        train_idx, val_idx = split_indices(dataset, 0.2, np.random.default_rng(0))
        assert len(val_idx) == 10
        assert not set(dataset.traj[train_idx]) & set(dataset.traj[val_idx])

    def test_sample_split_fallback(self, rect3):
        dataset = build_dataset(rect3, 1, 20, 0.1, seed=3)
        train_idx, val_idx = split_indices(dataset, 0.2, np.random.default_rng(0))
        assert len(val_idx) == 4 and len(train_idx) == 16

    def test_history_and_metadata(self, rect3):
        dataset = build_dataset(rect3, 5, 10, math.radians(5), seed=3)
        model, history = train(dataset, TrainConfig(max_epochs=10, patience=3))
        assert 1 <= history.best_epoch <= len(history) <= 10
        assert history.best_val_mse == min(history.val_mse[:history.best_epoch])
        assert model.metadata["label_source"] == "truth"
        assert model.metadata["n_train"] == 50
        assert model.fingerprint == rect3.fingerprint

    def test_label_scaling_from_training_split(self, rect3):
        dataset = build_dataset(rect3, 10, 10, math.radians(5), seed=3)
        config = TrainConfig(max_epochs=2, seed=1)
        model, _ = train(dataset, config)
        split_ss = np.random.SeedSequence(config.seed).spawn(3)[0]
        train_idx, _ = split_indices(dataset, config.val_fraction, np.random.default_rng(split_ss))
        labels = dataset.labels[train_idx]
        np.testing.assert_allclose(model.label_mean, labels.mean(axis=0))
        np.testing.assert_allclose(model.label_scale, labels.std(axis=0))

    def test_empty_dataset(self, rect3):
        with pytest.raises(DatasetError):
            train(build_dataset(rect3, 0, 10, 0.1), TrainConfig())

    def test_fingerprint_mismatch(self, rect3):
        with pytest.raises(DatasetError):
            train(build_dataset(rect3, 2, 10, 0.1), TrainConfig(max_epochs=1), fingerprint="abc")

    @pytest.mark.parametrize("kwargs", [
        {"node_factor": 0.0}, {"node_factor": 1.2}, {"dropout": 1.0},
        {"learning_rate": 0.0}, {"val_fraction": 1.0},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    @pytest.mark.slow
    def test_rect_room_sanity(self, rect3):
        train_set = build_dataset(rect3, 30, 30, math.radians(5), seed=0)
        test_set = build_dataset(rect3, 10, 30, math.radians(5), seed=1_000_000)
        model, _ = train(train_set, TrainConfig(seed=0))
        errors = euclidean_error(predict(model, test_set.adoa, test_set.mask), test_set.truth)
        assert np.median(errors) < 2.0

    @pytest.mark.slow
    def test_lroom_validation_mse(self, lroom3):
        values = []
        for seed in range(5):
            dataset = build_dataset(lroom3, 30, 30, math.radians(5), seed=seed)
            _, history = train(dataset, TrainConfig(seed=seed, max_epochs=1500, patience=100))
            values.append(history.best_val_mse)
        assert 0.1 <= float(np.median(values)) <= 0.3

    @pytest.mark.slow
    def test_noiseless_rect_room(self, rect3):
        medians = []
        for seed in range(5):
            train_set = build_dataset(rect3, 30, 30, 0.0, seed=seed)
            test_set = build_dataset(rect3, 10, 10, 0.0, seed=1_000_000 + seed)
            model, _ = train(train_set, TrainConfig(seed=seed, max_epochs=1500, patience=100))
            errors = euclidean_error(predict(model, test_set.adoa, test_set.mask), test_set.truth)
            medians.append(float(np.median(errors)))
        assert float(np.median(medians)) < 0.2


class TestModelFile:

    def test_round_trip_exact(self, rect3, tmp_path):
        dataset = build_dataset(rect3, 4, 10, math.radians(5), seed=3)
        model, _ = train(dataset, TrainConfig(max_epochs=3))
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.dims == model.dims
        for p, q in zip(model.parameters, loaded.parameters):
            np.testing.assert_array_equal(p, q)
        np.testing.assert_array_equal(loaded.norm_mean, model.norm_mean)
        np.testing.assert_array_equal(loaded.norm_std, model.norm_std)
        for name in ("wrap_center", "label_mean", "label_scale"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(model, name))
        assert loaded.fingerprint == model.fingerprint
        assert loaded.metadata["seed"] == 0

    def test_version1_file_defaults(self, rng, tmp_path):
        model = random_model(rng)
        data = model_to_dict(model)
        for name in ("wrap_center", "label_mean", "label_scale"):
            del data[name]
        data["format_version"] = 1
        path = tmp_path / "model.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.wrap_center, np.zeros(4))
        np.testing.assert_array_equal(loaded.label_mean, np.zeros(2))
        np.testing.assert_array_equal(loaded.label_scale, np.ones(2))
        X = rng.uniform(-3, 3, size=(5, 4))
        np.testing.assert_array_equal(predict(loaded, X), predict(model, X))

    def test_invalid_label_scale(self, rng):
        with pytest.raises(ModelFormatError):
            replace(random_model(rng), label_scale=np.array([1.0, 0.0]))
        with pytest.raises(ModelFormatError):
            replace(random_model(rng), wrap_center=np.zeros(3))

    def test_wrong_shape(self, rng, tmp_path):
        path = tmp_path / "model.json"
        save_model(random_model(rng), path)
        data = json.loads(path.read_text(encoding="utf-8"))
        data["dims"] = [4, 5, 2, 2]
        path.write_text(json.dumps(data), encoding="utf-8")
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_invalid_parameters(self):
        dims = LayerDims(2, 2, 1, 2)
        model = zero_model(dims)
        with pytest.raises(ModelFormatError):
            replace(model, norm_std=np.array([1.0, 0.0]))
        with pytest.raises(ModelFormatError):
            replace(model, biases=(np.array([np.nan, 0.0]), model.biases[1], model.biases[2]))
