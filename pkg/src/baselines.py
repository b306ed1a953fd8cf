"""
Memoryless comparison models: ridge-regularized linear map and shallow decoder network (SDN).
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import linalg

from nncore import (DEFAULT_DECODER_WIDTHS, DecoderParams, GradientSet, decoder_backward, decoder_forward,
                    init_decoder, loss_and_gradient)
from optimizer import TrainConfig, TrainReport, train
from sensing import Partition, WindowSet
from utils.error_handler import ContractViolation, InvalidArgumentError, NumericFailure
from utils.logger import logger

DEFAULT_RIDGE = 1e-8


def _current_inputs(measurement: np.ndarray, width: int, lagged: bool) -> np.ndarray:
    """Model input rows from a measurement vector, a batch, or K-step windows."""
    x = np.asarray(measurement, dtype=np.float64)
    if x.ndim == 3:
        return x.reshape(x.shape[0], -1) if lagged else x[:, -1, :]
    if lagged and x.ndim == 2 and x.shape[-1] != width and x.size == width:
        # a single K x d window
        return x.reshape(width)
    return x


@dataclass
class LinearModel:
    """x_hat = W y + b with W of shape n x d."""
    weights: np.ndarray
    intercept: np.ndarray
    ridge: float = DEFAULT_RIDGE
    lagged: bool = False

    @property
    def input_width(self) -> int:
        return self.weights.shape[1]

    def __call__(self, measurement: np.ndarray) -> np.ndarray:
        y = _current_inputs(measurement, self.input_width, self.lagged)
        if y.shape[-1] != self.input_width:
            raise ContractViolation(f"linear model expects width {self.input_width}, got {y.shape[-1]}")
        return y @ self.weights.T + self.intercept

    def named_arrays(self):
        return {"weights": self.weights, "intercept": self.intercept}


def fit_linear(inputs: np.ndarray, targets: np.ndarray, ridge: float = DEFAULT_RIDGE,
               lagged: bool = False) -> LinearModel:
    """
    Ridge regression through the normal equations (intercept unpenalized).

    Minimizes sum ||x - (W y + b)||^2 + ridge ||W||_F^2.

    Args:
        inputs: S x d current measurements, or S x K x d windows
        targets: S x n states
        ridge: Regularization weight
        lagged: Regress on the flattened K-step window instead of the last row

    Returns:
        LinearModel: Fitted map

    Raises:
        NumericFailure: if the normal equations are singular
    """
    if ridge < 0:
        raise InvalidArgumentError(f"ridge must be >= 0, got {ridge}")
    y = np.asarray(inputs, dtype=np.float64)
    if y.ndim == 3:
        y = y.reshape(y.shape[0], -1) if lagged else y[:, -1, :]
    x = np.asarray(targets, dtype=np.float64)
    samples, d = y.shape
    if samples < d + 1:
        raise InvalidArgumentError(f"need at least d+1={d + 1} training pairs, got {samples}")
    design = np.hstack([y, np.ones((samples, 1))])
    gram = design.T @ design
    gram[np.arange(d), np.arange(d)] += ridge
    try:
        beta = linalg.solve(gram, design.T @ x, assume_a="sym")
    except linalg.LinAlgError as e:
        raise NumericFailure(f"singular normal equations ({str(e)}); use ridge > 0") from e
    if not np.all(np.isfinite(beta)):
        raise NumericFailure("normal equations produced non-finite weights; use ridge > 0")
    return LinearModel(np.ascontiguousarray(beta[:d].T), beta[d].copy(), ridge, lagged)


@dataclass
class SdnModel:
    """Decoder applied directly to the current measurement (no recurrence)."""
    decoder: DecoderParams

    @property
    def input_width(self) -> int:
        return self.decoder.input_width

    def __call__(self, measurement: np.ndarray) -> np.ndarray:
        output, _ = decoder_forward(self.decoder, _current_inputs(measurement, self.input_width, False))
        return output


class SdnObjective:
    """Decoder-only model family; windows contribute their last row."""

    def loss_and_grads(self, params: DecoderParams, inputs, targets, loss_kind) -> Tuple[float, GradientSet]:
        output, caches = decoder_forward(params, inputs[:, -1, :])
        loss, dout = loss_and_gradient(output, targets, loss_kind)
        grads, _ = decoder_backward(params, caches, dout)
        gradient_set = GradientSet({name: grads[name] for name in params.named_arrays()})
        gradient_set.check_finite()
        return loss, gradient_set

    def predict(self, params: DecoderParams, inputs):
        output, _ = decoder_forward(params, inputs[:, -1, :])
        return output

    def copy(self, params: DecoderParams) -> DecoderParams:
        return params.copy()


def fit_sdn(samples: WindowSet, partition: Partition, widths: Sequence[int] = DEFAULT_DECODER_WIDTHS,
            config: TrainConfig = TrainConfig(), init_seed: int = 0,
            final_activation: bool = False) -> Tuple[SdnModel, TrainReport]:
    """
    Train a shallow decoder on instantaneous measurements.

    Uses the same ADAM loop, selection and stopping rule as the recurrent model.

    Args:
        samples: Scaled windows; only the last row of each is used
        partition: Train/validation/test end times
        widths: Decoder hidden widths; empty gives one affine layer
        config: Training hyperparameters
        init_seed: Initialization seed

    Returns:
        Tuple of the fitted SdnModel and its TrainReport
    """
    decoder = init_decoder(samples.d, widths, samples.n, np.random.default_rng(init_seed), final_activation)
    best, report = train(samples, partition, decoder, config, objective=SdnObjective())
    logger.debug(f"SDN trained with widths {list(widths)}")
    return SdnModel(best), report


def predict(model, measurement: np.ndarray) -> np.ndarray:
    """
    Reconstruction from a measurement vector, a batch of them, or K-step windows.

    Args:
        model: LinearModel or SdnModel
        measurement: d-vector, B x d batch or B x K x d windows

    Returns:
        np.ndarray: n-vector or B x n reconstructions
    """
    return model(measurement)
