import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../src')))

import unittest
from dataclasses import replace

import numpy as np
from numpy.testing import assert_allclose
from scipy.linalg import svdvals

from fieldgen import (FieldDataset, FieldKind, FieldSpec, default_frequencies, generate, generate_gait_cohort,
                      half_masks, primes, spatial_modes)
from utils.error_handler import ConfigError, InvalidSpecError


class TestSpatialModes(unittest.TestCase):
    def test_orthonormal(self):
        for shape in [(20, 20), (6, 4, 3), (18,)]:
            modes = spatial_modes(shape, 10)
            assert_allclose(modes.T @ modes, np.eye(10), atol=1e-12)

    def test_rank_above_node_count(self):
        with self.assertRaises(InvalidSpecError):
            spatial_modes((3, 3), 10)

    def test_default_frequencies_are_distinct(self):
        frequencies = default_frequencies(10)
        self.assertEqual(len(set(frequencies)), 10)
        self.assertAlmostEqual(frequencies[0], np.sqrt(2) / 100)
        self.assertEqual(len(set(default_frequencies(80))), 80)

    def test_primes(self):
        self.assertEqual(primes(5).tolist(), [2, 3, 5, 7, 11])
        self.assertEqual(primes(3, offset=2).tolist(), [5, 7, 11])
        self.assertEqual(int(primes(1000)[-1]), 7919)
        self.assertEqual(len(primes(1)), 1)


class TestLowRank(unittest.TestCase):
    def test_exact_rank_without_noise(self):
        dataset = generate(FieldSpec(kind="lowrank", grid_shape=(20, 20), N=1200, rank=5, noise_std=0.0))
        self.assertEqual(dataset.snapshots.shape, (400, 1200))
        s = svdvals(dataset.snapshots)
        self.assertLess(s[5] / s[0], 1e-8)
        self.assertGreater(s[4] / s[0], 1e-3)

    def test_high_rank(self):
        dataset = generate(FieldSpec(kind="lowrank", grid_shape=(20, 20), N=1200, rank=40, noise_std=0.0))
        self.assertEqual(dataset.snapshots.shape, (400, 1200))
        self.assertTrue(np.all(np.isfinite(dataset.snapshots)))
        s = svdvals(dataset.snapshots)
        self.assertLess(s[40] / s[0], 1e-8)

    def test_rank_above_node_count(self):
        with self.assertRaises(InvalidSpecError) as ctx:
            generate(FieldSpec(kind="lowrank", grid_shape=(3, 3), N=50, rank=10))
        self.assertIsInstance(ctx.exception, ConfigError)
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_deterministic(self):
        spec = FieldSpec(kind="lowrank", grid_shape=(8, 8), N=100, rank=3, seed=42)
        a, b = generate(spec), generate(spec)
        self.assertTrue(np.array_equal(a.snapshots, b.snapshots))
        c = generate(replace(spec, seed=43))
        self.assertFalse(np.array_equal(a.snapshots, c.snapshots))

    def test_default_noise_is_one_percent(self):
        spec = FieldSpec(kind="lowrank", grid_shape=(20, 20), N=1000, rank=5, seed=3)
        clean = generate(replace(spec, noise_std=0.0)).snapshots
        noisy = generate(spec).snapshots
        ratio = np.std(noisy - clean) / np.std(clean)
        self.assertAlmostEqual(ratio, 0.01, delta=0.0005)

    def test_mismatched_frequencies(self):
        with self.assertRaises(InvalidSpecError):
            generate(FieldSpec(kind="lowrank", grid_shape=(4, 4), N=20, rank=3, frequencies=(0.01, 0.02)))

    def test_dataset_is_read_only(self):
        dataset = generate(FieldSpec(kind="lowrank", grid_shape=(4, 4), N=20, rank=2))
        with self.assertRaises(ValueError):
            dataset.snapshots[0, 0] = 1.0


class TestFieldDataset(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(InvalidSpecError):
            FieldDataset(np.zeros((5, 10)), (2, 2))
        with self.assertRaises(InvalidSpecError):
            FieldDataset(np.zeros((4, 2)), (2, 2))
        with self.assertRaises(InvalidSpecError):
            FieldDataset(np.full((4, 5), np.nan), (2, 2))

    def test_node_coordinates(self):
        dataset = FieldDataset(np.zeros((6, 4)), (2, 3))
        assert_allclose(dataset.node_coordinates([0, 4, 5]), [[0, 0], [1, 1], [1, 2]])


class TestDiffusion(unittest.TestCase):
    def test_constant_field_stays_constant(self):
        spec = FieldSpec(kind="diffusion", grid_shape=(10, 10), N=50, initial_condition="constant",
                         initial_value=2.5, noise_std=0.0)
        assert_allclose(generate(spec).snapshots, 2.5, atol=1e-12)

    def test_mean_conserved_and_maximum_decays(self):
        spec = FieldSpec(kind="diffusion", grid_shape=(12, 12), N=200, initial_condition="hot_node",
                         noise_std=0.0)
        snapshots = generate(spec).snapshots
        means = snapshots.mean(axis=0)
        assert_allclose(means, means[0], atol=1e-12)
        self.assertTrue(np.all(np.diff(snapshots.max(axis=0)) <= 1e-12))

    def test_unstable_step_rejected(self):
        with self.assertRaises(InvalidSpecError) as ctx:
            generate(FieldSpec(kind="diffusion", grid_shape=(10, 10), N=20, diffusivity=0.2))
        self.assertEqual(ctx.exception.key, "diffusivity")


class TestDecoupled(unittest.TestCase):
    def test_halves_carry_independent_modes(self):
        spec = FieldSpec(kind="decoupled", grid_shape=(20, 20), N=1200, rank=5, noise_std=0.0)
        dataset = generate(spec)
        s = svdvals(dataset.snapshots)
        self.assertLess(s[10] / s[0], 1e-8)
        self.assertGreater(s[9] / s[0], 1e-4)
        left, right = half_masks(spec.grid_shape)
        self.assertEqual(int(left.sum()), 200)
        self.assertEqual(int(right.sum()), 200)
        self.assertLess(svdvals(dataset.snapshots[left])[5] / s[0], 1e-8)

    def test_high_rank(self):
        dataset = generate(FieldSpec(kind="decoupled", grid_shape=(40, 20), N=600, rank=20, noise_std=0.0))
        self.assertEqual(dataset.snapshots.shape, (800, 600))

    def test_halves_are_uncorrelated(self):
        spec = FieldSpec(kind="decoupled", grid_shape=(8, 4), N=2000, rank=3, noise_std=0.0)
        snapshots = generate(spec).snapshots
        left, right = half_masks(spec.grid_shape)
        correlation = np.corrcoef(snapshots[left], snapshots[right])[:16, 16:]
        self.assertLessEqual(np.abs(correlation).max(), 3 / np.sqrt(spec.N))

    def test_odd_first_axis(self):
        with self.assertRaises(InvalidSpecError):
            generate(FieldSpec(kind="decoupled", grid_shape=(9, 4), N=20, rank=2))


class TestGait(unittest.TestCase):
    def test_shape_and_mirror(self):
        spec = FieldSpec(kind="gait", grid_shape=(18,), N=400, mirror_channels=[(5, 2, -1.0)], noise_std=0.0)
        dataset = generate(spec)
        self.assertIs(spec.kind, FieldKind.GAIT)
        self.assertEqual(dataset.snapshots.shape, (18, 400))
        assert_allclose(dataset.snapshots[5], -dataset.snapshots[2], atol=0)

    def test_periodic_without_jitter(self):
        spec = FieldSpec(kind="gait", grid_shape=(18,), N=300, stride_period=50.0, noise_std=0.0)
        snapshots = generate(spec).snapshots
        assert_allclose(snapshots[:, 50:], snapshots[:, :-50], atol=1e-10)

    def test_noisy_channel_repeats_each_stride(self):
        spec = FieldSpec(kind="gait", grid_shape=(18,), N=1000, stride_period=50.0, noise_std=0.0)
        level = 0.3 * float(np.std(generate(spec).snapshots[1]))
        channel = generate(replace(spec, noise_std=level)).snapshots[1]
        self.assertGreater(np.corrcoef(channel[:-50], channel[50:])[0, 1], 0.8)

    def test_invalid_mirror(self):
        with self.assertRaises(InvalidSpecError):
            generate(FieldSpec(kind="gait", grid_shape=(18,), N=50, mirror_channels=[(3, 3, 1.0)]))

    def test_cohort_varies_by_subject(self):
        spec = FieldSpec(kind="gait", grid_shape=(18,), N=200, noise_std=0.0)
        cohort = generate_gait_cohort(spec, subjects=4)
        self.assertEqual(len(cohort), 4)
        self.assertEqual(cohort[2].name, "gait-subject02")
        self.assertFalse(np.allclose(cohort[0].snapshots, cohort[1].snapshots))
        with self.assertRaises(InvalidSpecError):
            generate_gait_cohort(spec, subjects=1)


if __name__ == "__main__":
    unittest.main()
