"""
ADAM optimization and the validation-selected training loop.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np

from nncore import GradientSet, LossKind, ShredParams, shred_backward, shred_forward
from sensing import Partition, WindowSet
from utils.error_handler import ConfigError, InvalidArgumentError, NumericFailure
from utils.logger import logger

LOG_EVERY = 10


def _named(obj) -> Dict[str, np.ndarray]:
    return obj.named_arrays() if hasattr(obj, "named_arrays") else dict(obj)


@dataclass
class AdamState:
    """Moment accumulators, step counter and hyperparameters of ADAM."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidArgumentError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.lr <= 0:
            raise InvalidArgumentError(f"lr and eps must be > 0, got {self.lr}, {self.eps}")

    @classmethod
    def for_params(cls, params, **hyper) -> "AdamState":
        """Zero accumulators shaped like `params`."""
        state = cls(**hyper)
        for name, array in _named(params).items():
            state.m[name] = np.zeros_like(array)
            state.v[name] = np.zeros_like(array)
        return state


def adam_step(params, grads, state: AdamState):
    """
    One bias-corrected ADAM update, applied in place.

        m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)

    Args:
        params: ShredParams, DecoderParams or a name -> array mapping
        grads: GradientSet or mapping with the same names and shapes
        state: Optimizer state, updated in place

    Returns:
        Tuple of the updated params and state

    Raises:
        NumericFailure: if any gradient entry is NaN or Inf
    """
    named_params = _named(params)
    named_grads = _named(grads)
    for name, g in named_grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient in {name}")
    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    for name, p in named_params.items():
        g = named_grads[name]
        if g.shape != p.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return params, state


def clip_gradients(grads: GradientSet, max_norm: Optional[float]) -> GradientSet:
    """Rescale so the global l2 norm is at most `max_norm` (None disables)."""
    if max_norm is None:
        return grads
    norm = grads.global_norm()
    if norm > max_norm:
        return grads.scaled(max_norm / norm)
    return grads


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 20
    seed: int = 0
    loss_kind: str = LossKind.MSE
    clip_norm: Optional[float] = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("training.epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("training.batch_size", f"must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError("training.patience", f"must be >= 1, got {self.patience}")
        if self.learning_rate <= 0:
            raise ConfigError("training.learning_rate", f"must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("training.beta1", f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError("training.eps", f"must be > 0, got {self.eps}")
        if self.loss_kind not in LossKind.ALL:
            raise ConfigError("training.loss_kind", f"must be one of {LossKind.ALL}, got {self.loss_kind!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("training.clip_norm", f"must be > 0 or null, got {self.clip_norm}")


@dataclass
class TrainReport:
    """Per-epoch curves and the selected epoch."""
    train_loss: List[float] = field(default_factory=list)
    val_mse: List[float] = field(default_factory=list)
    best_epoch: int = -1
    snapshot_id: str = ""

    @property
    def best_val_mse(self) -> float:
        return self.val_mse[self.best_epoch] if self.val_mse else float("nan")

    @property
    def epochs_run(self) -> int:
        return len(self.val_mse)

    def rows(self) -> List[Tuple[int, float, float]]:
        return [(epoch, loss, val) for epoch, (loss, val) in enumerate(zip(self.train_loss, self.val_mse))]


class Objective(Protocol):
    """Differentiable model family trained by `train`."""

    def loss_and_grads(self, params, inputs: np.ndarray, targets: np.ndarray,
                       loss_kind: str) -> Tuple[float, GradientSet]: ...

    def predict(self, params, inputs: np.ndarray) -> np.ndarray: ...

    def copy(self, params): ...


class ShredObjective:
    """LSTM encoder plus decoder on full K-step windows."""

    def loss_and_grads(self, params: ShredParams, inputs, targets, loss_kind):
        return shred_backward(params, inputs, targets, loss_kind)

    def predict(self, params: ShredParams, inputs):
        return shred_forward(params, inputs)

    def copy(self, params: ShredParams) -> ShredParams:
        return params.copy()


def snapshot_id(params) -> str:
    """Short content hash of a parameter set."""
    digest = hashlib.sha256()
    for name, array in _named(params).items():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return digest.hexdigest()[:16]


def validation_mse(objective: Objective, params, windows: WindowSet) -> float:
    """Full-batch mean squared error on scaled windows."""
    prediction = objective.predict(params, windows.inputs)
    return float(np.mean((prediction - windows.targets) ** 2))


def train(samples: WindowSet, partition: Partition, params, config: TrainConfig,
          objective: Optional[Objective] = None):
    """
    Mini-batch ADAM with validation-based model selection and early stopping.

    Args:
        samples: Scaled windows (scaler fitted on the training split)
        partition: Train/validation/test end times
        params: Initial parameters (not modified)
        config: Training hyperparameters
        objective: Model family; defaults to the recurrent encoder-decoder

    Returns:
        Tuple of the best parameters and the TrainReport

    Raises:
        NumericFailure: if the training loss becomes non-finite
    """
    objective = objective or ShredObjective()
    train_set = samples.select(partition.train)
    val_set = samples.select(partition.val)
    if len(train_set) == 0 or len(val_set) == 0:
        raise InvalidArgumentError("training and validation splits must be nonempty")

    params = objective.copy(params)
    state = AdamState.for_params(params, lr=config.learning_rate, beta1=config.beta1,
                                 beta2=config.beta2, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    best_params = objective.copy(params)
    best_val = np.inf
    stale = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            try:
                loss, grads = objective.loss_and_grads(params, train_set.inputs[batch], train_set.targets[batch],
                                                       config.loss_kind)
            except NumericFailure as e:
                raise NumericFailure(f"training diverged at epoch {epoch}: {str(e)}") from e
            if not np.isfinite(loss):
                raise NumericFailure(f"training diverged at epoch {epoch}: loss is {loss}")
            adam_step(params, clip_gradients(grads, config.clip_norm), state)
            total += loss * len(batch)
        epoch_loss = total / len(train_set)
        val = validation_mse(objective, params, val_set)
        if not np.isfinite(val):
            raise NumericFailure(f"training diverged at epoch {epoch}: validation MSE is {val}")
        report.train_loss.append(epoch_loss)
        report.val_mse.append(val)

        if val < best_val:
            best_val = val
            best_params = objective.copy(params)
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        if epoch % LOG_EVERY == 0:
            logger.debug(f"epoch {epoch}: train loss {epoch_loss:.6g}, validation MSE {val:.6g}")
        if stale >= config.patience:
            logger.debug(f"Early stop at epoch {epoch} (best epoch {report.best_epoch})")
            break

    report.snapshot_id = snapshot_id(best_params)
    logger.info(f"Training finished after {report.epochs_run} epochs; "
                f"best validation MSE {report.best_val_mse:.6g} at epoch {report.best_epoch}")
    return best_params, report
