"""
Unit tests for ADAM, batching, early stopping and the training loop.
"""

import json

import numpy as np
import pytest

from resident.autodiff import Parameter
from resident.data_pipeline import Dataset, Example
from resident.exceptions import ConfigurationError, ContractViolation
from resident.optim import (
    AdamState,
    EarlyStopping,
    EpochRecord,
    History,
    TrainConfig,
    adam_step,
    evaluate,
    make_batches,
    train,
)
from resident.resnet_model import ModelConfig, build_model
from tests.conftest import TINY_ARCH, toy_examples


class TestAdam:
    """Test suite for the ADAM update."""

    def test_first_step_moves_by_learning_rate(self):
        """Test the bias-corrected first step is lr * sign(gradient)."""
        w = Parameter("w", np.zeros(3))
        named = [("w", w)]
        state = AdamState.create(named)
        adam_step(named, {"w": np.array([0.5, -2.0, 0.0])}, state)
        np.testing.assert_allclose(w.data, [-0.001, 0.001, 0.0], atol=1e-9)
        assert state.t == 1

    def test_two_steps_match_bias_corrected_moments(self):
        """Test gradients 0.5 then -0.25 on w=1.0 against hand-computed moments."""
        w = Parameter("w", np.array([1.0]))
        named = [("w", w)]
        state = AdamState.create(named)
        lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8

        adam_step(named, {"w": np.array([0.5])}, state)
        m1, v1 = (1 - b1) * 0.5, (1 - b2) * 0.25
        expected = 1.0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
        np.testing.assert_allclose(w.data, [expected], rtol=0, atol=1e-12)

        adam_step(named, {"w": np.array([-0.25])}, state)
        m2 = b1 * m1 + (1 - b1) * -0.25
        v2 = b2 * v1 + (1 - b2) * 0.0625
        expected -= lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)
        np.testing.assert_allclose(w.data, [expected], rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.m["w"], [m2], rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.v["w"], [v2], rtol=0, atol=1e-12)
        assert state.t == 2

    def test_moments_start_at_zero(self):
        """Test created moments are zero and shaped like the parameters."""
        named = [("a", Parameter("a", np.ones((2, 3))))]
        state = AdamState.create(named, lr=0.01)
        np.testing.assert_array_equal(state.m["a"], np.zeros((2, 3)))
        np.testing.assert_array_equal(state.v["a"], np.zeros((2, 3)))
        assert state.lr == 0.01

    def test_step_replaces_parameter_array(self):
        """Test the update rebinds data instead of writing into the old array."""
        w = Parameter("w", np.ones(2))
        old = w.data
        named = [("w", w)]
        adam_step(named, {"w": np.ones(2)}, AdamState.create(named))
        np.testing.assert_array_equal(old, np.ones(2))
        assert w.data is not old

    def test_missing_or_misshapen_gradient_raises(self):
        """Test absent and wrongly shaped gradients are rejected."""
        named = [("w", Parameter("w", np.ones(2)))]
        with pytest.raises(ContractViolation):
            adam_step(named, {}, AdamState.create(named))
        with pytest.raises(ContractViolation):
            adam_step(named, {"w": np.ones(3)}, AdamState.create(named))


class TestMakeBatches:
    """Test suite for mini-batch construction."""

    def test_every_example_once_with_remainder(self, toy_dataset):
        """Test batches cover the data exactly once and the last holds the remainder."""
        batches = make_batches(toy_dataset, 5, 16, np.random.default_rng(0))
        assert [len(gold) for _, gold in batches] == [5, 5, 5, 5, 4]
        assert all(ids.shape[1] == 16 for ids, _ in batches)
        all_ids = np.concatenate([ids for ids, _ in batches])
        expected = toy_dataset.encode(16)
        assert sorted(map(bytes, all_ids.astype(np.uint16))) == sorted(
            map(bytes, expected.astype(np.uint16))
        )

    def test_unshuffled_keeps_order(self, toy_dataset):
        """Test shuffle=False keeps file order."""
        batches = make_batches(toy_dataset, 7, 16, shuffle=False)
        gold = np.concatenate([g for _, g in batches])
        np.testing.assert_array_equal(gold, toy_dataset.label_ids())

    def test_same_seed_same_order(self, toy_dataset):
        """Test shuffling is reproducible from the seed."""
        first = make_batches(toy_dataset, 4, 16, np.random.default_rng(3))
        second = make_batches(toy_dataset, 4, 16, np.random.default_rng(3))
        for (a, _), (b, _) in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_long_sentence_is_truncated(self):
        """Test a 500-byte sentence becomes exactly 384 byte ids."""
        dataset = Dataset.from_examples([Example.from_text("a" * 500, "aa-x")])
        [(ids, gold)] = make_batches(dataset, 100, 384, shuffle=False)
        assert ids.shape == (1, 384)
        np.testing.assert_array_equal(ids[0], np.full(384, ord("a")))
        np.testing.assert_array_equal(gold, [0])

    def test_batch_sizes_for_250_examples(self):
        """Test 250 examples at batch size 100 split as 100, 100, 50."""
        labels = ["aa-x", "aa-y"]
        dataset = Dataset.from_examples(
            [Example.from_text(f"lause {i}", labels[i % 2]) for i in range(250)]
        )
        batches = make_batches(dataset, 100, 16, np.random.default_rng(0))
        assert [len(gold) for _, gold in batches] == [100, 100, 50]
        assert sum(int(gold.sum()) for _, gold in batches) == 125

    def test_empty_dataset_raises(self, toy_dataset):
        """Test batching nothing is rejected."""
        with pytest.raises(ContractViolation):
            make_batches(Dataset([], toy_dataset.labels), 4, 16)


class TestEarlyStopping:
    """Test suite for the early-stopping helper."""

    def test_stops_after_patience_without_improvement(self):
        """Test two non-improving epochs stop training with patience 2."""
        stopper = EarlyStopping(patience=2)
        flags = [stopper(loss, epoch) for epoch, loss in enumerate([1.0, 0.9, 0.95, 0.92], 1)]
        assert flags == [True, True, False, False]
        assert stopper.should_stop
        assert stopper.best_epoch == 2

    def test_tie_keeps_earlier_epoch(self):
        """Test an equal loss is not an improvement."""
        stopper = EarlyStopping(patience=3)
        stopper(0.5, 1)
        assert stopper(0.5, 2) is False
        assert stopper.best_epoch == 1
        assert not stopper.should_stop

    def test_improvement_resets_counter(self):
        """Test a new best resets the patience counter."""
        stopper = EarlyStopping(patience=2)
        for epoch, loss in enumerate([1.0, 1.1, 0.8, 0.9], 1):
            stopper(loss, epoch)
        assert stopper.counter == 1
        assert not stopper.should_stop


class TestTrainConfig:
    """Test suite for training settings."""

    @pytest.mark.parametrize(
        "overrides", [{"batch_size": 0}, {"max_epochs": 0}, {"patience": -1}]
    )
    def test_invalid_settings_raise(self, overrides):
        """Test non-positive sizes and negative patience are rejected."""
        with pytest.raises(ConfigurationError):
            TrainConfig(**overrides)


class TestHistory:
    """Test suite for the per-epoch history."""

    def test_jsonl_leaves_out_wall_time(self):
        """Test JSON lines carry every field but the wall time."""
        history = History(
            records=[EpochRecord(1, 0.7, 0.6, 0.5, 10, True, 3.2)], best_epoch=1
        )
        line = json.loads(history.to_jsonl())
        assert line == {
            "epoch": 1,
            "train_loss": 0.7,
            "dev_loss": 0.6,
            "dev_accuracy": 0.5,
            "examples": 10,
            "improved": True,
        }


class TestTrain:
    """Test suite for the training loop."""

    def _split(self, dataset):
        return dataset.subset(range(0, 18)), dataset.subset(range(18, 24))

    def test_training_records_epochs_and_restores_best(self, tiny_model, toy_dataset, tmp_path):
        """Test history, metrics file and best-epoch restoration."""
        train_set, dev_set = self._split(toy_dataset)
        metrics_path = tmp_path / "metrics.jsonl"
        model, history = train(
            tiny_model,
            train_set,
            dev_set,
            TrainConfig(batch_size=6, max_epochs=4, patience=2),
            metrics_path,
        )

        assert 1 <= history.epochs_run <= 4
        assert 1 <= history.best_epoch <= history.epochs_run
        assert all(record.examples == len(train_set) for record in history.records)
        assert metrics_path.read_text(encoding="utf-8") == history.to_jsonl()

        best = history.records[history.best_epoch - 1]
        assert best.improved
        assert best.dev_loss == min(record.dev_loss for record in history.records)
        dev_loss, _ = evaluate(model, dev_set, 6)
        assert dev_loss == pytest.approx(best.dev_loss, abs=1e-3)

    def test_training_is_reproducible(self, tiny_config, tiny_labels, toy_dataset):
        """Test equal seeds give identical histories."""
        histories = []
        for _ in range(2):
            model = build_model(tiny_config, tiny_labels, seed=2)
            _, history = train(
                model, *self._split(toy_dataset), TrainConfig(batch_size=6, max_epochs=2)
            )
            histories.append(history.to_jsonl())
        assert histories[0] == histories[1]

    def test_missing_dev_set_holds_out_training_data(self, tiny_model, toy_dataset):
        """Test training without a dev set holds out part of the training data."""
        _, history = train(tiny_model, toy_dataset, None, TrainConfig(batch_size=8, max_epochs=1))
        assert history.records[0].examples == len(toy_dataset) - 2

    def test_early_stop_restores_best_epoch_weights(self, tiny_model, toy_dataset, monkeypatch):
        """Test patience 1 with dev losses 1.0, 0.9, 0.95 stops after epoch 3 at epoch 2."""
        losses = iter([1.0, 0.9, 0.95, 0.96])
        snapshots = []

        def scripted_evaluate(model, dataset, batch_size):
            snapshots.append(model.state_dict())
            return next(losses), 0.5

        monkeypatch.setattr("resident.optim.evaluate", scripted_evaluate)
        model, history = train(
            tiny_model,
            *self._split(toy_dataset),
            TrainConfig(batch_size=6, max_epochs=10, patience=1),
        )

        assert history.epochs_run == 3
        assert history.best_epoch == 2
        assert [record.improved for record in history.records] == [True, True, False]
        restored = model.state_dict()
        for name, value in snapshots[1].items():
            np.testing.assert_array_equal(restored[name], value)
        assert not np.array_equal(restored["head.W"], snapshots[2]["head.W"])

    def test_patience_beyond_max_epochs_runs_every_epoch(
        self, tiny_model, toy_dataset, monkeypatch
    ):
        """Test training runs exactly max_epochs when patience cannot trigger."""
        losses = iter([1.0, 1.1, 1.2])
        monkeypatch.setattr("resident.optim.evaluate", lambda *args: (next(losses), 0.5))
        _, history = train(
            tiny_model,
            *self._split(toy_dataset),
            TrainConfig(batch_size=6, max_epochs=3, patience=3),
        )
        assert history.epochs_run == 3
        assert history.best_epoch == 1

    def test_unknown_labels_raise(self, tiny_model, toy_dataset):
        """Test data with labels the model lacks is rejected."""
        foreign = Dataset.from_examples([Example.from_text("hola", "es-ar")] * 3)
        with pytest.raises(ConfigurationError):
            train(tiny_model, toy_dataset, foreign, TrainConfig(max_epochs=1))

    def test_empty_dev_set_raises(self, tiny_model, toy_dataset):
        """Test an empty dev set is rejected."""
        with pytest.raises(ConfigurationError):
            train(tiny_model, toy_dataset, Dataset([], toy_dataset.labels), TrainConfig())


@pytest.mark.slow
class TestLearning:
    """Test suite for training to convergence on easy tasks."""

    def test_memorizes_twenty_examples(self, tiny_labels):
        """Test train loss falls below 0.05 on a twenty-example set."""
        dataset = Dataset.from_examples(toy_examples(per_label=10))
        cfg = ModelConfig(n_classes=2, block_dropout=0.0, gru_dropout=0.0, **TINY_ARCH)
        model = build_model(cfg, tiny_labels, seed=1)
        _, history = train(
            model, dataset, dataset, TrainConfig(batch_size=4, max_epochs=200, patience=200)
        )
        assert min(record.train_loss for record in history.records) < 0.05

    def test_separates_byte_heavy_strings(self):
        """Test 'a'-heavy and 'b'-heavy strings are told apart within ten epochs."""
        rng = np.random.default_rng(0)

        def sample(n):
            examples = []
            for i in range(n):
                heavy, label = ("a", "xa") if i % 2 == 0 else ("b", "xb")
                chars = rng.choice([heavy] * 4 + ["c", "d", " "], size=int(rng.integers(8, 24)))
                examples.append(Example.from_text("".join(chars), label))
            return Dataset.from_examples(examples)

        train_set, dev_set = sample(200), sample(40)
        cfg = ModelConfig(
            n_classes=2, n_blocks=1, d_b=8, conv_filters=8, gru_hidden=8, max_len=32
        )
        model = build_model(cfg, train_set.labels, seed=1)
        _, history = train(
            model, train_set, dev_set, TrainConfig(batch_size=5, max_epochs=10, patience=10)
        )
        assert max(record.dev_accuracy for record in history.records) >= 0.95
