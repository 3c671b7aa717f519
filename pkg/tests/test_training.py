
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midres.model import ConfigError, Dense, Flatten, Model, NetworkConfig, build_model, init_parameters
from midres.tensor import Parameter, ShapeError, Tensor
from midres.training import (METHOD_NAMES, FoldReport, KFoldResult, OptimizerState, TrainConfig,
                             evaluate_accuracy, fit, iter_batches, kfold_run, loss_csv, report_table,
                             sgd_momentum_step, train_epoch)


class FeatureModel(Model):
    """Dense softmax classifier over [N, F, 1, 1] inputs, for toy problems."""

    def __init__(self, num_features, num_classes):
        super().__init__(NetworkConfig(), [Flatten(), Dense("out", num_features, num_classes)])

    def check_input(self, batch):
        return batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float64))


def toy_problem(n=40, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    centers = np.array([[-1.0, -1.0], [1.0, 1.0]])
    x = centers[labels] + rng.uniform(-0.5, 0.5, (n, 2))
    return x.reshape(n, 2, 1, 1), labels


def reference_full_batch_losses(x, y, w, b, lr, momentum, epochs):
    """Plain numpy softmax regression with classic momentum, written out by hand."""
    w, b = w.copy(), b.copy()
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    n = len(y)
    losses = []
    for _ in range(epochs):
        z = x @ w + b
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        losses.append(-np.log(p[np.arange(n), y]).mean())
        g = p.copy()
        g[np.arange(n), y] -= 1
        g /= n
        vw = momentum * vw + x.T @ g
        vb = momentum * vb + g.sum(axis=0)
        w -= lr * vw
        b -= lr * vb
    return losses


class TestMomentum:
    def test_first_step_is_plain_gradient(self):
        p = Parameter([1.0, 2.0], name="p")
        p.grad[...] = [0.5, -1.0]
        state = OptimizerState.for_params([p], 0.1, 0.9)
        sgd_momentum_step([p], state)
        np.testing.assert_array_equal(p.data, np.array([1.0, 2.0]) - 0.1 * np.array([0.5, -1.0]))

    def test_two_constant_steps(self):
        g = np.array([0.25, -0.5])
        p = Parameter([0.0, 0.0], name="p")
        state = OptimizerState.for_params([p], 0.01, 0.9)
        for _ in range(2):
            p.grad[...] = g
            sgd_momentum_step([p], state)
        np.testing.assert_allclose(p.data, -0.01 * (g + 1.9 * g), rtol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6), lr=st.floats(1e-4, 1.0), steps=st.integers(1, 6))
    def test_zero_momentum_is_plain_sgd(self, seed, lr, steps):
        rng = np.random.default_rng(seed)
        start = rng.standard_normal(4)
        p, q = Parameter(start.copy(), name="p"), start.copy()
        state = OptimizerState.for_params([p], lr, 0.0)
        for _ in range(steps):
            g = rng.standard_normal(4)
            p.grad[...] = g
            sgd_momentum_step([p], state)
            q = q - lr * g
        np.testing.assert_array_equal(p.data, q)

    def test_missing_velocity(self):
        a, b = Parameter([1.0], name="a"), Parameter([1.0], name="b")
        state = OptimizerState.for_params([a], 0.1, 0.9)
        with pytest.raises(KeyError, match="'b'"):
            sgd_momentum_step([a, b], state)


class TestLoop:
    def test_batch_sizes(self):
        assert [len(b) for b in iter_batches(10, 4, np.random.default_rng(0))] == [4, 4, 2]

    def test_batches_partition(self):
        idx = np.concatenate(list(iter_batches(23, 5, np.random.default_rng(1))))
        assert sorted(idx) == list(range(23))

    def test_toy_loss_matches_reference_and_decreases(self):
        x, y = toy_problem()
        model = FeatureModel(2, 2)
        rng = np.random.default_rng(3)
        w0, b0 = rng.standard_normal((2, 2)), np.zeros(2)
        model.param("out.weight").data[...] = w0
        cfg = TrainConfig(epochs=5, batch_size=len(y), learning_rate=0.1, shuffle=False)
        _, history = fit(model, x, y, cfg)
        ref = reference_full_batch_losses(x.reshape(-1, 2), y, w0, b0, 0.1, 0.9, 5)
        np.testing.assert_allclose(history, ref, rtol=1e-12)
        assert all(a > b for a, b in zip(history, history[1:]))

    def test_same_seed_same_parameters(self, synth_manifest):
        images = synth_manifest.load_images()[:12]
        labels = synth_manifest.labels[:12]
        cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=0.01)
        runs = [fit(init_parameters(build_model(NetworkConfig()), 0), images, labels, cfg) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        for (_, pa), (_, pb) in zip(runs[0][0].named_parameters(), runs[1][0].named_parameters()):
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_epochs_zero(self, synth_manifest):
        model = init_parameters(build_model(NetworkConfig()), 0)
        before = model.state_dict()
        _, history = fit(model, synth_manifest.load_images(), synth_manifest.labels, TrainConfig(epochs=0))
        assert history == []
        assert all(before[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())

    def test_history_length(self):
        x, y = toy_problem(12)
        _, history = fit(FeatureModel(2, 2), x, y, TrainConfig(epochs=3, batch_size=5))
        assert len(history) == 3

    def test_mismatched_dataset(self):
        x, y = toy_problem(12)
        model = FeatureModel(2, 2)
        with pytest.raises(ShapeError):
            train_epoch(model, x, y[:-1], OptimizerState.for_params(model.parameters(), 0.1, 0.9),
                        np.random.default_rng(0))

    def test_divergence_reported(self):
        x, y = toy_problem(12)
        with np.errstate(all="ignore"), pytest.raises(FloatingPointError, match="diverged at epoch"):
            fit(FeatureModel(2, 2), x * 1e200, y, TrainConfig(epochs=3, learning_rate=0.5))


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.epochs == 150
        assert cfg.learning_rate == 0.001
        assert cfg.momentum == 0.9

    @pytest.mark.parametrize("bad", [{"epochs": -1}, {"batch_size": 0}, {"learning_rate": 0.0},
                                     {"momentum": 1.0}, {"precision": "float16"}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="lr"):
            TrainConfig.from_dict({"lr": 0.1})


class TestEvaluate:
    def test_hand_counted_fixture(self):
        # weights pick feature 0 as class 0 and feature 1 as class 1; argmax follows the larger feature
        model = FeatureModel(2, 2)
        model.param("out.weight").data[...] = np.eye(2)
        feats = np.array([[1, 0], [0, 1], [1, 0], [1, 0], [0, 1], [0, 1], [1, 0], [0, 1], [1, 0], [0, 1]], float)
        labels = np.array([0, 1, 1, 0, 0, 1, 0, 1, 1, 1])
        pred = feats.argmax(axis=1)
        confusion = np.zeros((2, 2), int)
        for t, p in zip(labels, pred):
            confusion[t, p] += 1
        assert np.trace(confusion) == 7
        assert evaluate_accuracy(model, feats.reshape(10, 2, 1, 1), labels) == 7 / 10

    def test_all_correct(self):
        model = FeatureModel(2, 2)
        model.param("out.weight").data[...] = np.eye(2)
        feats = np.array([[2.0, 0.0], [0.0, 2.0]]).reshape(2, 2, 1, 1)
        assert evaluate_accuracy(model, feats, [0, 1]) == 1.0

    def test_untrained_near_chance(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0, 1, (60, 1, 64, 64))
        y = np.repeat(np.arange(3), 20)
        model = init_parameters(build_model(NetworkConfig()), 5)
        before = model.state_dict()
        assert 0.15 <= evaluate_accuracy(model, x, y) <= 0.55
        assert all(before[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate_accuracy(FeatureModel(2, 2), np.zeros((0, 2, 1, 1)), [])


class TestKFold:
    def test_mean_of_two_folds(self):
        result = KFoldResult("midres_classifier", [FoldReport(0, 10, 10, [], 9), FoldReport(1, 10, 10, [], 10)])
        assert result.mean_accuracy == 0.95

    def test_folds_csv(self):
        result = KFoldResult("x", [FoldReport(0, 2, 4, [], 1), FoldReport(1, 2, 4, [], 4)])
        assert result.folds_csv() == "fold,val_accuracy\n0,0.25\n1,1.0\n"

    def test_run_on_synthetic(self, synth_manifest):
        cfg = TrainConfig(epochs=1, batch_size=8)
        result = kfold_run(synth_manifest, NetworkConfig(), cfg, k=3)
        assert [f.fold_index for f in result.folds] == [0, 1, 2]
        assert sum(f.val_size for f in result.folds) == 30
        assert all(f.train_size + f.val_size == 30 for f in result.folds)
        assert result.mean_accuracy == sum(f.correct / f.val_size for f in result.folds) / 3

    def test_undersized_class(self, synth_manifest):
        with pytest.raises(ValueError, match="at least k=11"):
            kfold_run(synth_manifest, NetworkConfig(), TrainConfig(epochs=1), k=11)

    def test_shape_mismatch(self, synth_manifest):
        with pytest.raises(ShapeError):
            kfold_run(synth_manifest, NetworkConfig(input_size=128), TrainConfig(epochs=1), k=2)


class TestReportTable:
    def test_rows(self):
        table = report_table([(METHOD_NAMES["baseline_lenet"], 0.9006),
                              (METHOD_NAMES["midres_classifier"], 0.9598)])
        lines = table.text.splitlines()
        assert lines[0].split() == ["Method", "Accuracy"]
        assert lines[1].startswith("Proposed LeNet based network") and lines[1].endswith("90.06%")
        assert lines[2].startswith("Proposed MidResBlock classifier network") and lines[2].endswith("95.98%")
        assert table.csv == ("method,accuracy_percent\nProposed LeNet based network,90.06\n"
                             "Proposed MidResBlock classifier network,95.98\n")

    def test_empty_is_header_only(self):
        table = report_table([])
        assert table.text.splitlines() == ["Method  Accuracy"]
        assert table.csv == "method,accuracy_percent\n"

    def test_quotes_commas(self):
        assert report_table({"a,b": 0.5}).csv.splitlines()[1] == '"a,b",50.00'

    def test_loss_csv(self):
        assert loss_csv([1.5, 0.25]) == "epoch,loss\n1,1.5\n2,0.25\n"
