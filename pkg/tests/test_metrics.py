import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../src')))

import unittest

import numpy as np
from numpy.testing import assert_allclose

from fieldgen import FieldSpec, generate
from metrics import (compare_distributions, ensemble_mse_distribution, evaluate, normalized_mse, pooled_report,
                     singular_spectrum)
from sensing import WindowSet, assemble_windows, fit_scaler, fixed_trajectory
from utils.error_handler import ContractViolation, InvalidArgumentError


def toy_windows(S=50, n=6, seed=0):
    rng = np.random.default_rng(seed)
    return WindowSet(rng.normal(size=(S, 3, 2)), rng.normal(size=(S, n)) + 5.0, np.arange(S))


class TestEvaluate(unittest.TestCase):
    def test_oracle_has_zero_error(self):
        dataset = generate(FieldSpec(kind="lowrank", grid_shape=(5, 5), N=80, rank=3))
        windows = assemble_windows(dataset, fixed_trajectory((5, 5), [3]), K=4)
        scaler = fit_scaler(windows)
        report = evaluate(lambda inputs: scaler.scale_targets(windows.targets), windows, scaler)
        self.assertLess(report.mse, 1e-20)
        self.assertLess(report.nmse, 1e-18)
        self.assertEqual(report.samples, len(windows))

    def test_split_mean_predictor_has_unit_nmse(self):
        windows = toy_windows()
        mean = windows.targets.mean(axis=0)
        report = evaluate(lambda inputs: np.tile(mean, (len(inputs), 1)), windows)
        self.assertAlmostEqual(report.nmse, 1.0, places=12)
        self.assertAlmostEqual(report.mean_error, 0.0, places=12)

    def test_other_mean_predictor_is_near_unit_nmse(self):
        train, test = toy_windows(seed=1, S=2000), toy_windows(seed=2, S=2000)
        mean = train.targets.mean(axis=0)
        report = evaluate(lambda inputs: np.tile(mean, (len(inputs), 1)), test)
        self.assertAlmostEqual(report.nmse, 1.0, delta=0.01)

    def test_histogram_and_moments(self):
        windows = toy_windows()
        report = evaluate(lambda inputs: windows.targets + 0.5, windows)
        assert_allclose(report.per_sample_mse, 0.25)
        self.assertAlmostEqual(report.mean_error, 0.5)
        self.assertAlmostEqual(report.error_variance, 0.0)
        self.assertEqual(int(report.counts.sum()), windows.targets.size)
        self.assertEqual(len(report.bin_edges), len(report.counts) + 1)

    def test_node_restriction(self):
        windows = toy_windows()
        prediction = windows.targets.copy()
        prediction[:, 0] += 3.0
        report = evaluate(lambda inputs: prediction, windows, nodes=np.arange(1, 6))
        self.assertEqual(report.mse, 0.0)
        mask = np.zeros(6, dtype=bool)
        mask[0] = True
        self.assertAlmostEqual(evaluate(lambda inputs: prediction, windows, nodes=mask).mse, 9.0)

    def test_contracts(self):
        windows = toy_windows()
        with self.assertRaises(ContractViolation):
            evaluate(lambda inputs: np.zeros((len(inputs), 5)), windows)
        with self.assertRaises(InvalidArgumentError):
            evaluate(lambda inputs: inputs, windows.select(np.array([], dtype=np.int64)))

    def test_normalized_mse_of_constant_targets(self):
        self.assertEqual(normalized_mse(0.0, np.ones((4, 3))), 0.0)
        self.assertEqual(normalized_mse(1.0, np.ones((4, 3))), float("inf"))


class TestDistributions(unittest.TestCase):
    def test_variance_ratio(self):
        windows = toy_windows()
        noise = np.random.default_rng(3).normal(size=windows.targets.shape)
        a = evaluate(lambda inputs: windows.targets + noise, windows)
        b = evaluate(lambda inputs: windows.targets + 2.0 * noise, windows)
        self.assertAlmostEqual(compare_distributions(a, a).variance_ratio, 1.0)
        self.assertAlmostEqual(compare_distributions(b, a).variance_ratio, 4.0, places=10)

    def test_pooled_report(self):
        windows = toy_windows()
        a = evaluate(lambda inputs: windows.targets + 1.0, windows, keep_arrays=True)
        b = evaluate(lambda inputs: windows.targets - 1.0, windows, keep_arrays=True)
        pooled = pooled_report([a, b])
        self.assertEqual(pooled.samples, 2 * len(windows))
        self.assertAlmostEqual(pooled.mean_error, 0.0)
        self.assertAlmostEqual(pooled.error_variance, 1.0)
        with self.assertRaises(InvalidArgumentError):
            pooled_report([evaluate(lambda inputs: windows.targets, windows)])


class TestBoxStats(unittest.TestCase):
    def test_outlier(self):
        stats = ensemble_mse_distribution([1, 2, 3, 4, 100])
        self.assertEqual((stats.q1, stats.median, stats.q3), (2.0, 3.0, 4.0))
        self.assertEqual((stats.whisker_low, stats.whisker_high), (1.0, 4.0))
        self.assertEqual(stats.outliers, [100.0])

    def test_identical_values(self):
        stats = ensemble_mse_distribution([0.5] * 6)
        self.assertEqual((stats.q1, stats.median, stats.q3), (0.5, 0.5, 0.5))
        self.assertEqual(stats.outliers, [])

    def test_too_few_models(self):
        with self.assertRaises(InvalidArgumentError):
            ensemble_mse_distribution([1.0, 2.0, 3.0])


class TestSpectrum(unittest.TestCase):
    def test_descending(self):
        assert_allclose(singular_spectrum(np.diag([1.0, 3.0, 2.0])), [3.0, 2.0, 1.0])


if __name__ == "__main__":
    unittest.main()
