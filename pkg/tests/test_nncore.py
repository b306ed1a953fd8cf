import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../src')))

import unittest

import numpy as np
from numpy.testing import assert_allclose

from nncore import (DecoderParams, LossKind, ShredParams, decoder_forward, init_params, lstm_sequence, relu,
                    shred_backward, shred_forward, sigmoid)
from utils.error_handler import ContractViolation, InvalidArgumentError, NumericFailure


def brute_force_lstm(params, window):
    """Cell equations evaluated one scalar row at a time."""
    sequence = [window[t] for t in range(window.shape[0])]
    for layer in params.lstm.layers:
        h = np.zeros(layer.hidden)
        c = np.zeros(layer.hidden)
        outputs = []
        for y in sequence:
            z = np.concatenate([h, y])
            gates = {}
            for gate in ("o", "f", "i", "g"):
                W, b = getattr(layer, f"W_{gate}"), getattr(layer, f"b_{gate}")
                a = np.array([sum(W[r, k] * z[k] for k in range(z.size)) + b[r] for r in range(layer.hidden)])
                gates[gate] = np.tanh(a) if gate == "g" else 1.0 / (1.0 + np.exp(-a))
            c = gates["f"] * c + gates["i"] * gates["g"]
            h = gates["o"] * np.tanh(c)
            outputs.append(h)
        sequence = outputs
    return sequence[-1]


def brute_force_decoder(decoder, h):
    u = h
    for j, (W, b) in enumerate(zip(decoder.weights, decoder.biases)):
        a = np.array([sum(W[r, k] * u[k] for k in range(u.size)) + b[r] for r in range(W.shape[0])])
        last = j == decoder.depth - 1
        u = np.maximum(a, 0.0) if (not last or decoder.final_activation) else a
    return u


def numeric_gradient(params, window, target, name, loss_kind, step=1e-5):
    array = params.named_arrays()[name]
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + step
        plus, _ = shred_backward(params, window, target, loss_kind)
        array[index] = original - step
        minus, _ = shred_backward(params, window, target, loss_kind)
        array[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


class TestActivations(unittest.TestCase):
    def test_ranges(self):
        z = np.linspace(-30, 30, 101)
        self.assertTrue(np.all((sigmoid(z) >= 0) & (sigmoid(z) <= 1)))
        self.assertAlmostEqual(float(sigmoid(0.0)), 0.5)
        assert_allclose(relu(np.array([-1.0, 0.0, 2.5])), [0.0, 0.0, 2.5])

    def test_sigmoid_symmetry(self):
        z = np.linspace(-30, 30, 241)
        assert_allclose(sigmoid(z) + sigmoid(-z), np.ones_like(z), rtol=0, atol=1e-15)

    def test_sigmoid_stable_for_large_inputs(self):
        self.assertEqual(float(sigmoid(-1000.0)), 0.0)
        self.assertEqual(float(sigmoid(1000.0)), 1.0)


class TestForward(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_lstm_and_decoder_match_brute_force(self):
        for trial in range(20):
            h, d, K, n = 3, 2, 4, 5
            params = init_params(h, d, n, decoder_widths=(6,), L=1 + trial % 2, seed=trial)
            window = self.rng.normal(size=(K, d))
            latent, _ = lstm_sequence(params.lstm, window)
            assert_allclose(latent, brute_force_lstm(params, window), rtol=0, atol=1e-13)
            output, _ = decoder_forward(params.decoder, latent)
            assert_allclose(output, brute_force_decoder(params.decoder, latent), rtol=0, atol=1e-13)

    def test_batch_matches_single_windows(self):
        params = init_params(4, 2, 5, decoder_widths=(7, 6), seed=1)
        batch = self.rng.normal(size=(3, 6, 2))
        stacked = shred_forward(params, batch)
        for b in range(3):
            assert_allclose(stacked[b], shred_forward(params, batch[b]), rtol=0, atol=1e-14)

    def test_zero_state_single_step(self):
        params = init_params(2, 1, 3, decoder_widths=(), seed=0)
        layer = params.lstm.layers[0]
        y = np.array([[0.3]])
        z = np.concatenate([np.zeros(2), y[0]])
        i = sigmoid(layer.W_i @ z + layer.b_i)
        g = np.tanh(layer.W_g @ z + layer.b_g)
        o = sigmoid(layer.W_o @ z + layer.b_o)
        latent, _ = lstm_sequence(params.lstm, y)
        assert_allclose(latent, o * np.tanh(i * g), atol=1e-14)

    def test_final_activation_flag(self):
        params = init_params(4, 2, 6, decoder_widths=(5,), seed=3, final_activation=True)
        output = shred_forward(params, self.rng.normal(size=(10, 8, 2)))
        self.assertTrue(np.all(output >= 0))

    def test_shape_contracts(self):
        params = init_params(4, 2, 5, decoder_widths=(6,), seed=0)
        with self.assertRaises(ContractViolation):
            shred_forward(params, np.zeros((7, 3)))
        with self.assertRaises(ContractViolation):
            shred_backward(params, np.zeros((7, 2)), np.zeros(4))
        with self.assertRaises(ContractViolation):
            ShredParams(params.lstm, DecoderParams([np.zeros((5, 3))], [np.zeros(5)]))

    def test_init_bounds(self):
        h, d = 8, 3
        params = init_params(h, d, 10, decoder_widths=(12,), seed=5)
        layer = params.lstm.layers[0]
        self.assertEqual(layer.W_f.shape, (h, h + d))
        self.assertLessEqual(np.abs(layer.W_f).max(), 1 / np.sqrt(h + d))
        self.assertLessEqual(np.abs(params.decoder.weights[0]).max(), 1 / np.sqrt(h))
        with self.assertRaises(InvalidArgumentError):
            init_params(0, 2, 3)

    def test_copy_round_trip(self):
        params = init_params(4, 2, 5, decoder_widths=(6,), L=2, seed=2)
        clone = params.copy()
        for name, array in params.named_arrays().items():
            assert_allclose(clone.named_arrays()[name], array, rtol=0, atol=0)
            self.assertIsNot(clone.named_arrays()[name], array)
        self.assertEqual(clone.hyperparameters(), params.hyperparameters())


class TestGradients(unittest.TestCase):
    def check(self, params, window, target, loss_kind=LossKind.MSE):
        _, grads = shred_backward(params, window, target, loss_kind)
        for name in params.named_arrays():
            analytic = grads.named_arrays()[name]
            numeric = numeric_gradient(params, window, target, name, loss_kind)
            scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-7)
            self.assertLessEqual(np.abs(analytic - numeric).max() / scale, 1e-5, name)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for trial in range(3):
            params = init_params(4, 2, 5, decoder_widths=(6,), seed=100 + trial)
            window = rng.normal(size=(7, 2))
            target = rng.normal(size=5)
            self.check(params, window, target)

    def test_batched_two_layer_gradient(self):
        rng = np.random.default_rng(12)
        params = init_params(3, 2, 4, decoder_widths=(5,), L=2, seed=4)
        self.check(params, rng.normal(size=(3, 5, 2)), rng.normal(size=(3, 4)))

    def test_l2norm_gradient(self):
        rng = np.random.default_rng(13)
        params = init_params(3, 2, 4, decoder_widths=(5,), seed=6)
        self.check(params, rng.normal(size=(2, 5, 2)), rng.normal(size=(2, 4)), LossKind.L2NORM)

    def test_loss_values(self):
        params = init_params(3, 1, 2, decoder_widths=(), seed=0)
        window = np.ones((4, 1))
        prediction = shred_forward(params, window)
        loss, _ = shred_backward(params, window, prediction + np.array([3.0, 4.0]), LossKind.L2NORM)
        self.assertAlmostEqual(loss, 5.0, places=12)
        loss, _ = shred_backward(params, window, prediction + np.array([3.0, 4.0]), LossKind.MSE)
        self.assertAlmostEqual(loss, 12.5, places=12)

    def test_zero_error_gives_zero_gradient(self):
        params = init_params(4, 2, 5, decoder_widths=(6,), seed=8)
        window = np.random.default_rng(14).normal(size=(6, 2))
        for loss_kind in (LossKind.MSE, LossKind.L2NORM):
            loss, grads = shred_backward(params, window, shred_forward(params, window), loss_kind)
            self.assertEqual(loss, 0.0)
            for name, g in grads.named_arrays().items():
                self.assertTrue(np.all(g == 0), f"{loss_kind}:{name}")

    def test_loss_scale_scales_loss_and_gradient(self):
        rng = np.random.default_rng(15)
        params = init_params(3, 2, 4, decoder_widths=(5,), seed=9)
        window, target = rng.normal(size=(5, 2)), rng.normal(size=4)
        loss, grads = shred_backward(params, window, target)
        doubled_loss, doubled = shred_backward(params, window, target, loss_scale=2.0)
        self.assertAlmostEqual(doubled_loss, 2.0 * loss, places=14)
        for name, g in grads.named_arrays().items():
            assert_allclose(doubled.named_arrays()[name], 2.0 * g, rtol=1e-14, atol=0, err_msg=name)

    def test_non_finite_gradient_raises(self):
        params = init_params(3, 1, 2, decoder_widths=(4,), seed=0)
        with self.assertRaises(NumericFailure):
            shred_backward(params, np.ones((3, 1)), np.array([np.nan, 0.0]))


if __name__ == "__main__":
    unittest.main()
