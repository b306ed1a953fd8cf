import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../src')))

import unittest

import numpy as np
from numpy.testing import assert_allclose

from fieldgen import FieldDataset
from nncore import GradientSet, init_params, shred_backward
from optimizer import AdamState, TrainConfig, adam_step, clip_gradients, snapshot_id, train
from sensing import (Partition, PartitionMode, apply_scaler, assemble_windows, fit_scaler, fixed_trajectory,
                     partition_windows)
from utils.error_handler import ConfigError, NumericFailure


class TestAdam(unittest.TestCase):
    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.array([1.0])}
        state = AdamState.for_params(params, lr=0.1)
        adam_step(params, {"w": np.array([3.0])}, state)
        assert_allclose(params["w"], [0.9], atol=1e-8)
        self.assertEqual(state.t, 1)

    def test_quadratic_converges(self):
        params = {"w": np.array([1.0])}
        state = AdamState.for_params(params, lr=0.1)
        for _ in range(500):
            adam_step(params, {"w": 2.0 * params["w"]}, state)
            if abs(params["w"][0]) < 1e-3:
                break
        self.assertLess(abs(params["w"][0]), 1e-3)

    def test_zero_gradient_leaves_parameters(self):
        params = init_params(3, 1, 2, decoder_widths=(4,), seed=0)
        before = params.copy()
        state = AdamState.for_params(params)
        zeros = GradientSet({name: np.zeros_like(a) for name, a in params.named_arrays().items()})
        for _ in range(5):
            adam_step(params, zeros, state)
        for name, array in params.named_arrays().items():
            assert_allclose(array, before.named_arrays()[name], atol=0)

    def test_non_finite_gradient(self):
        params = {"w": np.array([1.0, 2.0])}
        state = AdamState.for_params(params)
        with self.assertRaises(NumericFailure):
            adam_step(params, {"w": np.array([np.inf, 0.0])}, state)
        assert_allclose(params["w"], [1.0, 2.0])
        self.assertEqual(state.t, 0)

    def test_clip(self):
        grads = GradientSet({"a": np.array([3.0]), "b": np.array([4.0])})
        clipped = clip_gradients(grads, 1.0)
        self.assertAlmostEqual(clipped.global_norm(), 1.0)
        self.assertIs(clip_gradients(grads, None), grads)
        self.assertIs(clip_gradients(grads, 10.0), grads)


class TestTrainConfig(unittest.TestCase):
    def test_invalid_values_name_the_key(self):
        cases = {"training.batch_size": {"batch_size": 0}, "training.epochs": {"epochs": 0},
                 "training.learning_rate": {"learning_rate": -1.0}, "training.loss_kind": {"loss_kind": "huber"},
                 "training.clip_norm": {"clip_norm": 0.0}}
        for key, kwargs in cases.items():
            with self.assertRaises(ConfigError) as ctx:
                TrainConfig(**kwargs)
            self.assertEqual(ctx.exception.key, key)
            self.assertTrue(str(ctx.exception).startswith(key + ":"))


class TestTrain(unittest.TestCase):
    def setUp(self):
        t = np.arange(120)
        snapshots = np.vstack([np.sin(0.2 * t + k) for k in range(4)])
        self.dataset = FieldDataset(snapshots, (4,))
        self.windows = assemble_windows(self.dataset, fixed_trajectory((4,), [0]), K=5)
        self.partition = partition_windows(self.windows, "random", seed=1)
        scaler = fit_scaler(self.windows.select(self.partition.train))
        self.scaled = apply_scaler(scaler, self.windows)

    def test_report_and_selection(self):
        config = TrainConfig(epochs=15, batch_size=16, learning_rate=1e-2, patience=50, seed=2)
        params = init_params(6, 1, 4, decoder_widths=(8,), seed=3)
        before = params.copy()
        best, report = train(self.scaled, self.partition, params, config)
        self.assertEqual(report.epochs_run, 15)
        self.assertEqual(len(report.rows()), 15)
        self.assertEqual(report.best_val_mse, min(report.val_mse))
        self.assertEqual(report.val_mse[report.best_epoch], report.best_val_mse)
        self.assertLess(report.best_val_mse, report.val_mse[0] + 1e-12)
        self.assertEqual(report.snapshot_id, snapshot_id(best))
        # initial parameters are not modified
        for name, array in params.named_arrays().items():
            assert_allclose(array, before.named_arrays()[name], atol=0)

    def test_deterministic(self):
        config = TrainConfig(epochs=5, batch_size=16, seed=4)
        params = init_params(4, 1, 4, decoder_widths=(6,), seed=5)
        _, a = train(self.scaled, self.partition, params, config)
        _, b = train(self.scaled, self.partition, params, config)
        self.assertEqual(a.val_mse, b.val_mse)
        self.assertEqual(a.snapshot_id, b.snapshot_id)

    def test_early_stopping(self):
        # steps far below one ulp leave the validation error unchanged
        config = TrainConfig(epochs=200, batch_size=200, learning_rate=1e-300, patience=1, seed=0)
        params = init_params(4, 1, 4, decoder_widths=(), seed=0)
        _, report = train(self.scaled, self.partition, params, config)
        self.assertEqual(report.epochs_run, 2)
        self.assertEqual(report.best_epoch, 0)

    def test_constant_field_is_learned(self):
        # every window is identical, so each mini-batch sees the same objective
        dataset = FieldDataset(np.full((4, 200), 2.0), (4,))
        windows = assemble_windows(dataset, fixed_trajectory((4,), [1]), K=3)
        partition = partition_windows(windows, "random", seed=0)
        scaled = apply_scaler(fit_scaler(windows.select(partition.train)), windows)
        assert_allclose(scaled.targets, 0.5)
        config = TrainConfig(epochs=5, batch_size=1, learning_rate=1e-2, patience=5, seed=0)
        _, report = train(scaled, partition, init_params(4, 1, 4, decoder_widths=(8,), seed=1), config)
        self.assertLessEqual(len(report.val_mse), 5)
        self.assertLessEqual(report.best_val_mse, 1e-4)

    def test_one_epoch_on_one_sample_lowers_its_loss(self):
        end = self.scaled.t_index[10:11]
        single = Partition(PartitionMode.RANDOM, end, end, end)
        sample = self.scaled.select(end)
        params = init_params(6, 1, 4, decoder_widths=(8,), seed=7)
        config = TrainConfig(epochs=1, batch_size=1, learning_rate=1e-3, seed=0)
        trained, report = train(self.scaled, single, params, config)
        before, _ = shred_backward(params, sample.inputs, sample.targets)
        after, _ = shred_backward(trained, sample.inputs, sample.targets)
        self.assertLess(after, before)
        self.assertEqual(len(report.train_loss), 1)
        self.assertAlmostEqual(report.train_loss[0], before, places=12)

    def test_divergence_raises(self):
        config = TrainConfig(epochs=3, batch_size=16, learning_rate=1e300, clip_norm=None, seed=0)
        params = init_params(4, 1, 4, decoder_widths=(6,), seed=0)
        with self.assertRaises(NumericFailure):
            train(self.scaled, self.partition, params, config)


if __name__ == "__main__":
    unittest.main()
