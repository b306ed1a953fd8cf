"""
Recurrent encoder (stacked LSTM) and shallow ReLU decoder with exact reverse-mode gradients.

Arrays use the row convention: a batch of vectors is B x width and a layer
computes a = u @ W.T + b with W of shape (out, in). Every function also
accepts unbatched inputs (no leading batch axis).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from utils.error_handler import ContractViolation, InvalidArgumentError, NumericFailure

GATES = ("o", "f", "i", "g")
DEFAULT_HIDDEN = 64
DEFAULT_DECODER_WIDTHS = (350, 400)


class LossKind:
    """Training objectives."""
    MSE = "mse"
    L2NORM = "l2norm"
    ALL = (MSE, L2NORM)


def sigmoid(z):
    """Logistic function, values in (0, 1)."""
    return expit(z)


def tanh(z):
    """Hyperbolic tangent, values in (-1, 1)."""
    return np.tanh(z)


def relu(z):
    """max(0, z) elementwise."""
    return np.maximum(z, 0.0)


@dataclass
class LstmLayer:
    """Gate weights act on the concatenation [h_{t-1}, y_t]."""
    W_o: np.ndarray
    W_f: np.ndarray
    W_i: np.ndarray
    W_g: np.ndarray
    b_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_g: np.ndarray

    def __post_init__(self):
        h, width = self.W_o.shape
        for gate in GATES:
            if getattr(self, f"W_{gate}").shape != (h, width):
                raise ContractViolation(f"W_{gate} shape {getattr(self, f'W_{gate}').shape} != {(h, width)}")
            if getattr(self, f"b_{gate}").shape != (h,):
                raise ContractViolation(f"b_{gate} shape {getattr(self, f'b_{gate}').shape} != {(h,)}")
        if width <= h:
            raise ContractViolation(f"gate width {width} leaves no room for inputs with hidden width {h}")

    @property
    def hidden(self) -> int:
        return self.W_o.shape[0]

    @property
    def input_width(self) -> int:
        return self.W_o.shape[1] - self.hidden

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"W_{gate}": getattr(self, f"W_{gate}") for gate in GATES}
        arrays.update({f"b_{gate}": getattr(self, f"b_{gate}") for gate in GATES})
        return arrays


@dataclass
class LstmParams:
    """Stack of L cells; layer l > 1 reads the hidden sequence of layer l-1."""
    layers: List[LstmLayer]

    def __post_init__(self):
        if not self.layers:
            raise ContractViolation("an LSTM needs at least one layer")
        for below, above in zip(self.layers, self.layers[1:]):
            if above.input_width != below.hidden:
                raise ContractViolation(f"layer input width {above.input_width} != hidden width {below.hidden}")

    @property
    def hidden(self) -> int:
        return self.layers[-1].hidden

    @property
    def input_width(self) -> int:
        return self.layers[0].input_width

    @property
    def depth(self) -> int:
        return len(self.layers)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {f"lstm.{l}.{name}": array
                for l, layer in enumerate(self.layers) for name, array in layer.named_arrays().items()}


@dataclass
class DecoderParams:
    """
    Feed-forward decoder R(W^b ... R(W^1 h)).

    The final layer is linear unless `final_activation` is set, which applies
    ReLU after the last layer as well.
    """
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    final_activation: bool = False

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ContractViolation("decoder needs matching, non-empty weight and bias lists")
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ContractViolation(f"decoder layer {j}: weight {W.shape} and bias {b.shape} disagree")
        for j, (lower, upper) in enumerate(zip(self.weights, self.weights[1:])):
            if upper.shape[1] != lower.shape[0]:
                raise ContractViolation(f"decoder layers {j} and {j + 1} do not chain")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_width(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_widths(self) -> Tuple[int, ...]:
        return tuple(W.shape[0] for W in self.weights[:-1])

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"decoder.{j}.W"] = W
            arrays[f"decoder.{j}.b"] = b
        return arrays

    def copy(self) -> "DecoderParams":
        return DecoderParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                             self.final_activation)


@dataclass
class ShredParams:
    """All trainable arrays of the recurrent encoder and the decoder."""
    lstm: LstmParams
    decoder: DecoderParams

    def __post_init__(self):
        if self.decoder.input_width != self.lstm.hidden:
            raise ContractViolation(
                f"decoder input width {self.decoder.input_width} != LSTM hidden width {self.lstm.hidden}")

    def named_arrays(self) -> Dict[str, np.ndarray]:
        """Name -> array references, in a fixed order."""
        arrays = self.lstm.named_arrays()
        arrays.update(self.decoder.named_arrays())
        return arrays

    def copy(self) -> "ShredParams":
        return ShredParams.from_named_arrays(
            {name: array.copy() for name, array in self.named_arrays().items()},
            self.decoder.final_activation)

    def hyperparameters(self) -> Dict:
        return {
            "hidden": self.lstm.hidden,
            "input_width": self.lstm.input_width,
            "output_width": self.decoder.output_width,
            "layers": self.lstm.depth,
            "decoder_widths": list(self.decoder.hidden_widths),
            "final_activation": self.decoder.final_activation,
        }

    @classmethod
    def from_named_arrays(cls, arrays: Dict[str, np.ndarray], final_activation: bool = False) -> "ShredParams":
        """Rebuild parameters from `named_arrays` output (e.g. a checkpoint)."""
        layers = []
        while f"lstm.{len(layers)}.W_o" in arrays:
            prefix = f"lstm.{len(layers)}."
            layers.append(LstmLayer(**{key: np.asarray(arrays[prefix + key], dtype=np.float64)
                                       for key in LstmLayer.__dataclass_fields__}))
        weights, biases = [], []
        while f"decoder.{len(weights)}.W" in arrays:
            j = len(weights)
            weights.append(np.asarray(arrays[f"decoder.{j}.W"], dtype=np.float64))
            biases.append(np.asarray(arrays[f"decoder.{j}.b"], dtype=np.float64))
        return cls(LstmParams(layers), DecoderParams(weights, biases, final_activation))


@dataclass
class GradientSet:
    """One gradient array per parameter array, keyed like `named_arrays`."""
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return self.arrays

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet({name: factor * g for name, g in self.arrays.items()})

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.arrays.values())))

    def check_finite(self):
        """
        Raises:
            NumericFailure: naming the first array with NaN or Inf entries
        """
        for name, g in self.arrays.items():
            if not np.all(np.isfinite(g)):
                raise NumericFailure(f"non-finite gradient in {name}")


@dataclass
class CellCache:
    """Activations kept by one cell step for the backward pass."""
    z: np.ndarray
    o: np.ndarray
    f: np.ndarray
    i: np.ndarray
    g: np.ndarray
    c_prev: np.ndarray
    tanh_c: np.ndarray


def lstm_cell_forward(layer: LstmLayer, h_prev: np.ndarray, c_prev: np.ndarray,
                      y_t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, CellCache]:
    """
    One LSTM step.

        c_t = sigma(W_f z + b_f) * c_{t-1} + sigma(W_i z + b_i) * tanh(W_g z + b_g)
        h_t = sigma(W_o z + b_o) * tanh(c_t),  z = [h_{t-1}, y_t]

    Args:
        layer: Cell parameters
        h_prev: Previous hidden state (..., h)
        c_prev: Previous cell state (..., h)
        y_t: Input (..., d)

    Returns:
        Tuple of new hidden state, new cell state and the cache
    """
    h = layer.hidden
    if h_prev.shape[-1] != h or c_prev.shape != h_prev.shape:
        raise ContractViolation(f"state shapes {h_prev.shape}/{c_prev.shape} do not match hidden width {h}")
    if y_t.shape[-1] != layer.input_width or y_t.shape[:-1] != h_prev.shape[:-1]:
        raise ContractViolation(f"input shape {y_t.shape} does not match input width {layer.input_width}")
    z = np.concatenate([h_prev, y_t], axis=-1)
    o = sigmoid(z @ layer.W_o.T + layer.b_o)
    f = sigmoid(z @ layer.W_f.T + layer.b_f)
    i = sigmoid(z @ layer.W_i.T + layer.b_i)
    g = np.tanh(z @ layer.W_g.T + layer.b_g)
    c_t = f * c_prev + i * g
    tanh_c = np.tanh(c_t)
    h_t = o * tanh_c
    return h_t, c_t, CellCache(z, o, f, i, g, c_prev, tanh_c)


def lstm_cell_backward(layer: LstmLayer, cache: CellCache, dh: np.ndarray, dc: np.ndarray,
                       grads: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Reverse of `lstm_cell_forward`; accumulates parameter gradients into `grads`.

    Returns:
        Tuple of gradients w.r.t. h_prev, c_prev and y_t
    """
    h = layer.hidden
    do = dh * cache.tanh_c
    dc = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    pre = {
        "o": do * cache.o * (1.0 - cache.o),
        "f": dc * cache.c_prev * cache.f * (1.0 - cache.f),
        "i": dc * cache.g * cache.i * (1.0 - cache.i),
        "g": dc * cache.i * (1.0 - cache.g ** 2),
    }
    z2 = cache.z.reshape(-1, cache.z.shape[-1])
    dz = np.zeros_like(cache.z)
    for gate, da in pre.items():
        W = getattr(layer, f"W_{gate}")
        da2 = da.reshape(-1, h)
        grads[f"W_{gate}"] += da2.T @ z2
        grads[f"b_{gate}"] += da2.sum(axis=0)
        dz += da @ W
    return dz[..., :h], dc * cache.f, dz[..., h:]


def lstm_sequence(params: LstmParams, inputs: np.ndarray) -> Tuple[np.ndarray, List[List[CellCache]]]:
    """
    Run the stacked LSTM over a K-step window from zero initial states.

    Args:
        params: LSTM parameters
        inputs: K x d window, or B x K x d batch of windows

    Returns:
        Tuple of the top-layer hidden state at the last step and per-layer caches
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ContractViolation(f"inputs must be K x d or B x K x d, got shape {x.shape}")
    if x.shape[-2] < 1:
        raise ContractViolation("window length K must be >= 1")
    if x.shape[-1] != params.input_width:
        raise ContractViolation(f"input width {x.shape[-1]} != LSTM input width {params.input_width}")
    lead = x.shape[:-2]
    sequence = [x[..., t, :] for t in range(x.shape[-2])]
    caches = []
    for layer in params.layers:
        h_t = np.zeros(lead + (layer.hidden,))
        c_t = np.zeros(lead + (layer.hidden,))
        layer_caches, outputs = [], []
        for y_t in sequence:
            h_t, c_t, cache = lstm_cell_forward(layer, h_t, c_t, y_t)
            layer_caches.append(cache)
            outputs.append(h_t)
        caches.append(layer_caches)
        sequence = outputs
    return sequence[-1], caches


def lstm_sequence_backward(params: LstmParams, caches: List[List[CellCache]],
                           dh_last: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Backpropagation through time over all steps and layers.

    Args:
        params: LSTM parameters
        caches: Caches from `lstm_sequence`
        dh_last: Gradient w.r.t. the top-layer hidden state at the last step

    Returns:
        Dict[str, np.ndarray]: Gradients keyed like `LstmParams.named_arrays`
    """
    grads = {}
    K = len(caches[0])
    upstream: List[Optional[np.ndarray]] = [None] * (K - 1) + [dh_last]
    for l in reversed(range(params.depth)):
        layer = params.layers[l]
        layer_grads = {name: np.zeros_like(array) for name, array in layer.named_arrays().items()}
        dh_next = np.zeros(dh_last.shape[:-1] + (layer.hidden,))
        dc_next = np.zeros_like(dh_next)
        below: List[Optional[np.ndarray]] = [None] * K
        for t in reversed(range(K)):
            dh = dh_next if upstream[t] is None else dh_next + upstream[t]
            dh_next, dc_next, below[t] = lstm_cell_backward(layer, caches[l][t], dh, dc_next, layer_grads)
        grads.update({f"lstm.{l}.{name}": g for name, g in layer_grads.items()})
        upstream = below
    return grads


def decoder_forward(params: DecoderParams, h: np.ndarray) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray]]]:
    """
    Alternating affine maps and ReLU.

    Args:
        params: Decoder parameters
        h: Latent state (..., width)

    Returns:
        Tuple of the output (..., n) and per-layer (input, pre-activation) caches
    """
    u = np.asarray(h, dtype=np.float64)
    caches = []
    for j, (W, b) in enumerate(zip(params.weights, params.biases)):
        if u.shape[-1] != W.shape[1]:
            raise ContractViolation(f"decoder layer {j} expects width {W.shape[1]}, got {u.shape[-1]}")
        a = u @ W.T + b
        caches.append((u, a))
        u = relu(a) if _activated(params, j) else a
    return u, caches


def _activated(params: DecoderParams, j: int) -> bool:
    return j < params.depth - 1 or params.final_activation


def decoder_backward(params: DecoderParams, caches: List[Tuple[np.ndarray, np.ndarray]],
                     dout: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    Reverse of `decoder_forward`.

    Returns:
        Tuple of gradients keyed like `DecoderParams.named_arrays` and the
        gradient w.r.t. the decoder input
    """
    grads = {}
    d = dout
    for j in reversed(range(params.depth)):
        u, a = caches[j]
        if _activated(params, j):
            d = d * (a > 0)
        d2 = d.reshape(-1, d.shape[-1])
        grads[f"decoder.{j}.W"] = d2.T @ u.reshape(-1, u.shape[-1])
        grads[f"decoder.{j}.b"] = d2.sum(axis=0)
        d = d @ params.weights[j]
    return grads, d


def _window_inputs(window) -> np.ndarray:
    return np.asarray(getattr(window, "inputs", window), dtype=np.float64)


def shred_forward(params: ShredParams, window) -> np.ndarray:
    """
    Reconstruction x_hat_T = F(G(window)).

    Args:
        params: Network parameters
        window: WindowSample, K x d array or B x K x d batch

    Returns:
        np.ndarray: n-vector (or B x n)
    """
    latent, _ = lstm_sequence(params.lstm, _window_inputs(window))
    output, _ = decoder_forward(params.decoder, latent)
    return output


def loss_and_gradient(prediction: np.ndarray, target: np.ndarray, loss_kind: str = LossKind.MSE,
                      loss_scale: float = 1.0) -> Tuple[float, np.ndarray]:
    """
    Batch-mean loss and its gradient w.r.t. the prediction.

    mse is the mean squared error over nodes; l2norm is the unsquared
    Euclidean norm of the residual. Both are averaged over the batch.
    """
    if loss_kind not in LossKind.ALL:
        raise InvalidArgumentError(f"unknown loss kind {loss_kind!r}")
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ContractViolation(f"prediction shape {prediction.shape} != target shape {target.shape}")
    residual = prediction - target
    r2 = residual.reshape(-1, residual.shape[-1])
    batch, n = r2.shape
    if loss_kind == LossKind.MSE:
        loss = float(np.mean(r2 ** 2))
        grad = 2.0 * residual / (batch * n)
    else:
        norms = np.linalg.norm(r2, axis=1)
        loss = float(np.mean(norms))
        # Zero residual rows get zero gradient
        safe = np.where(norms > 0, norms, 1.0).reshape(residual.shape[:-1] + (1,))
        grad = residual / safe / batch
    return loss_scale * loss, loss_scale * grad


def shred_backward(params: ShredParams, window, target: np.ndarray, loss_kind: str = LossKind.MSE,
                   loss_scale: float = 1.0) -> Tuple[float, GradientSet]:
    """
    Loss of one window (or a batch) and its exact gradient w.r.t. every parameter.

    Args:
        params: Network parameters
        window: WindowSample, K x d array or B x K x d batch
        target: n-vector or B x n targets (scaled)
        loss_kind: mse or l2norm
        loss_scale: Multiplier on the loss

    Returns:
        Tuple of loss value and gradients

    Raises:
        NumericFailure: if any gradient array contains NaN or Inf
    """
    latent, lstm_caches = lstm_sequence(params.lstm, _window_inputs(window))
    output, decoder_caches = decoder_forward(params.decoder, latent)
    loss, dout = loss_and_gradient(output, target, loss_kind, loss_scale)
    decoder_grads, dlatent = decoder_backward(params.decoder, decoder_caches, dout)
    arrays = lstm_sequence_backward(params.lstm, lstm_caches, dlatent)
    arrays.update(decoder_grads)
    grads = GradientSet({name: arrays[name] for name in params.named_arrays()})
    grads.check_finite()
    return loss, grads


def init_decoder(input_width: int, widths: Sequence[int], output_width: int, rng: np.random.Generator,
                 final_activation: bool = False) -> DecoderParams:
    """Decoder with entries uniform on +-1/sqrt(fan_in)."""
    sizes = [input_width] + [int(w) for w in widths] + [output_width]
    if any(s < 1 for s in sizes):
        raise InvalidArgumentError(f"decoder widths must be positive, got {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return DecoderParams(weights, biases, final_activation)


def init_params(h: int, d: int, n: int, decoder_widths: Sequence[int] = DEFAULT_DECODER_WIDTHS, L: int = 1,
                seed: int = 0, final_activation: bool = False) -> ShredParams:
    """
    Random parameters, every entry uniform on +-1/sqrt(fan_in).

    The fan-in of a gate is h + d (the width of [h_{t-1}, y_t]).

    Args:
        h: Hidden width
        d: Input width
        n: Output width (field nodes)
        decoder_widths: Hidden widths of the decoder; empty gives one affine layer
        L: Number of stacked LSTM layers
        seed: Random seed
        final_activation: Apply ReLU after the last decoder layer

    Returns:
        ShredParams: Freshly initialized parameters
    """
    if min(h, d, n, L) < 1:
        raise InvalidArgumentError(f"h, d, n and L must be >= 1, got h={h}, d={d}, n={n}, L={L}")
    rng = np.random.default_rng(seed)
    layers = []
    width = d
    for _ in range(L):
        bound = 1.0 / np.sqrt(h + width)
        arrays = {f"W_{gate}": rng.uniform(-bound, bound, size=(h, h + width)) for gate in GATES}
        arrays.update({f"b_{gate}": rng.uniform(-bound, bound, size=h) for gate in GATES})
        layers.append(LstmLayer(**arrays))
        width = h
    decoder = init_decoder(h, decoder_widths, n, rng, final_activation)
    return ShredParams(LstmParams(layers), decoder)


@dataclass
class ShredModel:
    """Callable wrapper mapping scaled windows to scaled reconstructions."""
    params: ShredParams

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return shred_forward(self.params, inputs)
