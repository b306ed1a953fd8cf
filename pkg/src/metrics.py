"""
Reconstruction error statistics in physical units.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import linalg

from sensing import Scaler, WindowSet
from utils.error_handler import ContractViolation, InvalidArgumentError

HISTOGRAM_BINS = 101
HISTOGRAM_HALF_WIDTH = 4.0
WHISKER_IQR = 1.5


@dataclass
class EvalReport:
    """Errors of one model on one split, all in unscaled units."""
    per_sample_mse: np.ndarray
    mean_error: float
    error_variance: float
    bin_edges: np.ndarray
    counts: np.ndarray
    mse: float
    nmse: float
    predictions: Optional[np.ndarray] = field(default=None, repr=False)
    targets: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def samples(self) -> int:
        return len(self.per_sample_mse)


def error_histogram(errors: np.ndarray, center: float, spread: float):
    """
    Fixed-width histogram over center +- 4 spread; outliers land in the edge bins.

    Returns:
        Tuple of bin edges (102) and counts (101) summing to errors.size
    """
    half_width = HISTOGRAM_HALF_WIDTH * spread if spread > 0 else 1.0
    edges = np.linspace(center - half_width, center + half_width, HISTOGRAM_BINS + 1)
    counts, _ = np.histogram(np.clip(errors, edges[0], edges[-1]), bins=edges)
    return edges, counts


def normalized_mse(mse: float, targets: np.ndarray) -> float:
    """MSE over the node-averaged temporal variance of the targets."""
    variance = float(np.mean(np.var(targets, axis=0)))
    if variance == 0:
        return 0.0 if mse == 0 else float("inf")
    return mse / variance


def evaluate(model: Callable[[np.ndarray], np.ndarray], windows: WindowSet, scaler: Optional[Scaler] = None,
             nodes: Optional[np.ndarray] = None, keep_arrays: bool = False) -> EvalReport:
    """
    Reconstruction errors of a model on unscaled windows.

    Inputs are scaled before the model sees them and predictions are mapped
    back to physical units before any error is computed.

    Args:
        model: Callable from scaled B x K x d inputs to scaled B x n outputs
        windows: Unscaled test windows
        scaler: Scaler fitted on the training split (None for identity)
        nodes: Optional node index array or boolean mask restricting the errors
        keep_arrays: Keep predictions and targets on the report

    Returns:
        EvalReport: Per-sample MSE, pooled error moments, histogram and NMSE
    """
    if len(windows) == 0:
        raise InvalidArgumentError("cannot evaluate an empty split")
    inputs = windows.inputs if scaler is None else scaler.scale_inputs(windows.inputs)
    prediction = np.asarray(model(inputs), dtype=np.float64)
    if scaler is not None:
        prediction = scaler.unscale_targets(prediction)
    if prediction.shape != windows.targets.shape:
        raise ContractViolation(f"model output {prediction.shape} != targets {windows.targets.shape}")
    targets = windows.targets
    if nodes is not None:
        prediction = prediction[:, nodes]
        targets = targets[:, nodes]
    errors = prediction - targets
    per_sample = np.mean(errors ** 2, axis=1)
    mean_error = float(np.mean(errors))
    variance = float(np.var(errors))
    edges, counts = error_histogram(errors.ravel(), mean_error, float(np.sqrt(variance)))
    mse = float(np.mean(per_sample))
    return EvalReport(per_sample, mean_error, variance, edges, counts, mse, normalized_mse(mse, targets),
                      prediction if keep_arrays else None, targets if keep_arrays else None)


@dataclass(frozen=True)
class DistributionComparison:
    """Pooled error moments of two reports and their variance ratio (A over B)."""
    mean_a: float
    variance_a: float
    mean_b: float
    variance_b: float
    variance_ratio: float


def compare_distributions(report_a: EvalReport, report_b: EvalReport) -> DistributionComparison:
    """
    Compare pooled pointwise error distributions.

    Returns:
        DistributionComparison: ratio = variance_a / variance_b
    """
    va, vb = report_a.error_variance, report_b.error_variance
    if vb == 0:
        ratio = 1.0 if va == 0 else float("inf")
    else:
        ratio = va / vb
    return DistributionComparison(report_a.mean_error, va, report_b.mean_error, vb, ratio)


def pooled_report(reports: Sequence[EvalReport]) -> EvalReport:
    """Merge reports of an ensemble into one pooled-error report."""
    if not reports or any(r.predictions is None for r in reports):
        raise InvalidArgumentError("pooling needs reports evaluated with keep_arrays=True")
    predictions = np.vstack([r.predictions for r in reports])
    targets = np.vstack([r.targets for r in reports])
    errors = predictions - targets
    per_sample = np.mean(errors ** 2, axis=1)
    mean_error = float(np.mean(errors))
    variance = float(np.var(errors))
    edges, counts = error_histogram(errors.ravel(), mean_error, float(np.sqrt(variance)))
    mse = float(np.mean(per_sample))
    return EvalReport(per_sample, mean_error, variance, edges, counts, mse, normalized_mse(mse, targets))


@dataclass(frozen=True)
class BoxStats:
    """Box-plot summary with 1.5 IQR whiskers."""
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: List[float]


def ensemble_mse_distribution(mses: Sequence[float]) -> BoxStats:
    """
    Quartiles, whiskers and outliers of per-model test MSEs.

    Quartiles use linear interpolation; whiskers reach the most extreme values
    within 1.5 IQR of the box.

    Args:
        mses: One test MSE per model (at least 4)

    Returns:
        BoxStats: Summary for a box plot
    """
    values = np.asarray([float(v) for v in mses])
    if values.size < 4:
        raise InvalidArgumentError(f"need at least 4 models, got {values.size}")
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    low_fence, high_fence = q1 - WHISKER_IQR * iqr, q3 + WHISKER_IQR * iqr
    inside = values[(values >= low_fence) & (values <= high_fence)]
    outliers = sorted(float(v) for v in values[(values < low_fence) | (values > high_fence)])
    return BoxStats(float(q1), float(median), float(q3), float(inside.min()), float(inside.max()), outliers)


def singular_spectrum(snapshots: np.ndarray) -> np.ndarray:
    """Singular values of a snapshot matrix in descending order."""
    return linalg.svdvals(np.asarray(snapshots, dtype=np.float64))
