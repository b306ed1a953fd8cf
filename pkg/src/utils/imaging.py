"""
Heatmap snapshots (PPM) and optional PNG figures.
"""

from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from utils.error_handler import InvalidArgumentError
from utils.logger import logger

COLORMAP = "viridis"
COLORMAP_SIZE = 256
PIXEL_SCALE = 8
SEPARATOR = 255

PathLike = Union[str, Path]


def colormap_table() -> np.ndarray:
    """The fixed 256 x 3 uint8 palette used for every heatmap."""
    rgba = matplotlib.colormaps[COLORMAP].resampled(COLORMAP_SIZE)(np.arange(COLORMAP_SIZE))
    return np.round(rgba[:, :3] * 255).astype(np.uint8)


def as_image(values: np.ndarray, grid_shape: Sequence[int]) -> np.ndarray:
    """
    Lay out a node vector as a 2-D image.

    One-dimensional lattices become a single-row strip; for three or more axes
    the middle slice along the first axis is shown.
    """
    grid_shape = tuple(grid_shape)
    image = np.asarray(values, dtype=np.float64).reshape(grid_shape)
    if image.ndim == 1:
        return image[None, :]
    while image.ndim > 2:
        image = image[image.shape[0] // 2]
    return image


def colorize(image: np.ndarray, low: float, high: float) -> np.ndarray:
    """Map values in [low, high] to palette colors (H x W x 3 uint8)."""
    span = high - low if high > low else 1.0
    index = np.clip(np.round((image - low) / span * (COLORMAP_SIZE - 1)), 0, COLORMAP_SIZE - 1)
    return colormap_table()[index.astype(np.int64)]


def write_triptych(path: PathLike, truth: np.ndarray, reconstruction: np.ndarray,
                   grid_shape: Sequence[int], scale: int = PIXEL_SCALE) -> Tuple[int, int]:
    """
    Write ground truth, reconstruction and absolute error side by side as a P6 PPM.

    Truth and reconstruction share one color range; the error panel spans
    [0, max error]. Panels are separated by a white column.

    Args:
        path: Destination .ppm file
        truth: n-vector ground truth
        reconstruction: n-vector reconstruction
        grid_shape: Lattice shape
        scale: Pixels per node along each axis

    Returns:
        Tuple of image width and height in pixels
    """
    if scale < 1:
        raise InvalidArgumentError(f"scale must be >= 1, got {scale}")
    truth_image = as_image(truth, grid_shape)
    recon_image = as_image(reconstruction, grid_shape)
    error_image = np.abs(recon_image - truth_image)
    low = float(min(truth_image.min(), recon_image.min()))
    high = float(max(truth_image.max(), recon_image.max()))
    panels = [colorize(truth_image, low, high), colorize(recon_image, low, high),
              colorize(error_image, 0.0, float(error_image.max()))]
    panels = [np.repeat(np.repeat(p, scale, axis=0), scale, axis=1) for p in panels]
    height = panels[0].shape[0]
    gap = np.full((height, 1, 3), SEPARATOR, dtype=np.uint8)
    pixels = np.concatenate([panels[0], gap, panels[1], gap, panels[2]], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, "RGB").save(path, format="PPM")
    return pixels.shape[1], pixels.shape[0]


def histogram_figure(path: PathLike, bin_edges: np.ndarray, counts: np.ndarray, title: str) -> Path:
    """Bar plot of a pointwise error histogram."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.stairs(counts, bin_edges, fill=True)
    ax.set_xlabel("reconstruction error")
    ax.set_ylabel("count")
    ax.set_title(title)
    return _save(fig, path)


def boxplot_figure(path: PathLike, mses: Dict[str, Sequence[float]], title: str) -> Path:
    """Box plot (1.5 IQR whiskers) of per-model test MSEs, one box per label."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([list(v) for v in mses.values()], whis=1.5)
    ax.set_xticks(range(1, len(mses) + 1), list(mses.keys()))
    ax.set_yscale("log")
    ax.set_ylabel("test MSE")
    ax.set_title(title)
    return _save(fig, path)


def sweep_figure(path: PathLike, widths: Sequence[int], mses: Sequence[float],
                 singular_values: np.ndarray) -> Path:
    """Test MSE against hidden width next to the normalized singular spectrum."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    left.semilogy(widths, mses, "o-")
    left.set_xlabel("hidden width")
    left.set_ylabel("mean test MSE")
    spectrum = np.asarray(singular_values)
    right.semilogy(np.arange(1, spectrum.size + 1), spectrum / spectrum[0], ".")
    right.set_xlabel("index")
    right.set_ylabel("singular value / first")
    return _save(fig, path)


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.debug(f"Saved figure {path}")
    return path
