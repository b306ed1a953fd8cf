"""
Time-dependent point measurements: sensor trajectories, lagged windows, partitions and scaling.
"""

from dataclasses import dataclass
from enum import Enum
from math import lcm
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from fieldgen import FieldDataset
from utils.error_handler import InvalidArgumentError
from utils.logger import logger

DEFAULT_STEP_INTERVAL = 3


@dataclass(frozen=True)
class SensorTrajectory:
    """
    Per-timestep node indices of m sensors (rows of the selection matrix C_t).

    A periodic trajectory with period P may be queried past its stored length:
    positions[t] == positions[t mod P].
    """
    positions: np.ndarray
    grid_shape: Tuple[int, ...]
    period: Optional[int] = None
    name: str = "trajectory"

    def __post_init__(self):
        positions = np.array(self.positions, dtype=np.int64)
        if positions.ndim == 1:
            positions = positions[:, None]
        grid_shape = tuple(int(s) for s in self.grid_shape)
        n = int(np.prod(grid_shape))
        if positions.ndim != 2 or positions.shape[0] < 1 or positions.shape[1] < 1:
            raise InvalidArgumentError(f"positions must be a non-empty (N, m) array, got shape {positions.shape}")
        if positions.min() < 0 or positions.max() >= n:
            raise InvalidArgumentError(f"node indices must lie in [0, {n})")
        if self.period is not None:
            if self.period < 1 or self.period > positions.shape[0]:
                raise InvalidArgumentError(f"period {self.period} outside [1, {positions.shape[0]}]")
            t = np.arange(positions.shape[0])
            if not np.array_equal(positions, positions[t % self.period]):
                raise InvalidArgumentError(f"positions do not repeat with period {self.period}")
        positions.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "grid_shape", grid_shape)

    @property
    def m(self) -> int:
        return self.positions.shape[1]

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def n(self) -> int:
        return int(np.prod(self.grid_shape))

    @property
    def periodic(self) -> bool:
        return self.period is not None

    def indices_at(self, t: int) -> np.ndarray:
        """Node indices measured at time t."""
        if 0 <= t < self.N:
            return self.positions[t]
        if self.periodic and t >= 0:
            return self.positions[t % self.period]
        raise IndexError(f"time {t} outside trajectory of length {self.N}")

    def span(self, N: int) -> np.ndarray:
        """Positions for times 0..N-1 (N x m)."""
        if N <= self.N:
            return self.positions[:N]
        if not self.periodic:
            raise InvalidArgumentError(f"trajectory of length {self.N} cannot cover {N} snapshots")
        return self.positions[np.arange(N) % self.period]

    def coordinates(self, N: int) -> np.ndarray:
        """Lattice coordinates normalized to [0, 1] per axis (N x m x axes)."""
        coords = np.stack(np.unravel_index(self.span(N), self.grid_shape), axis=-1).astype(np.float64)
        extent = np.maximum(np.asarray(self.grid_shape) - 1, 1)
        return coords / extent


def fixed_trajectory(grid_shape: Sequence[int], indices: Sequence[int], name: str = "fixed") -> SensorTrajectory:
    """
    Sensors pinned to the given nodes.

    Args:
        grid_shape: Lattice shape
        indices: One node index per sensor

    Returns:
        SensorTrajectory: Periodic with period 1
    """
    indices = list(indices)
    if not indices:
        raise InvalidArgumentError("at least one sensor index required")
    return SensorTrajectory(np.asarray([indices]), grid_shape, period=1, name=name)


def immobile_trajectory(n: int, m: int, seed: int, grid_shape: Optional[Sequence[int]] = None) -> SensorTrajectory:
    """
    m distinct nodes drawn uniformly without replacement, constant in time.

    Args:
        n: Node count
        m: Sensor count
        seed: Random seed
        grid_shape: Lattice shape (defaults to a flat lattice of n nodes)

    Returns:
        SensorTrajectory: Periodic with period 1
    """
    if not 1 <= m <= n:
        raise InvalidArgumentError(f"sensor count m={m} must lie in [1, n={n}]")
    rng = np.random.default_rng(seed)
    indices = rng.choice(n, size=m, replace=False)
    return fixed_trajectory(grid_shape or (n,), indices, name=f"immobile{m}")


def _legal_moves(coord: np.ndarray, grid_shape: Tuple[int, ...]) -> list:
    moves = []
    for axis, size in enumerate(grid_shape):
        for step in (-1, 1):
            if 0 <= coord[axis] + step < size:
                moves.append((axis, step))
    return moves


def random_walk_trajectory(grid_shape: Sequence[int], N: int, step_interval: int = DEFAULT_STEP_INTERVAL,
                           seed: int = 0, m: int = 1) -> SensorTrajectory:
    """
    Lattice random walk starting at the center node.

    The walker moves one node along one axis at every multiple of
    `step_interval`. Moves leaving the lattice are resampled, so the legal
    moves are equally likely.

    Args:
        grid_shape: Lattice shape
        N: Number of time steps
        step_interval: Snapshots between moves
        seed: Random seed
        m: Number of independent walkers

    Returns:
        SensorTrajectory: Non-periodic trajectory
    """
    grid_shape = tuple(int(s) for s in grid_shape)
    if step_interval < 1:
        raise InvalidArgumentError(f"step_interval must be >= 1, got {step_interval}")
    if N < 1 or m < 1:
        raise InvalidArgumentError(f"N and m must be >= 1, got N={N}, m={m}")
    rng = np.random.default_rng(seed)
    center = np.array([s // 2 for s in grid_shape])
    positions = np.empty((N, m), dtype=np.int64)
    for walker in range(m):
        coord = center.copy()
        for t in range(N):
            if t > 0 and t % step_interval == 0:
                moves = _legal_moves(coord, grid_shape)
                if moves:
                    axis, step = moves[int(rng.integers(len(moves)))]
                    coord[axis] += step
            positions[t, walker] = np.ravel_multi_index(tuple(coord), grid_shape)
    return SensorTrajectory(positions, grid_shape, name=f"walk{step_interval}")


def circuit_trajectory(grid_shape: Sequence[int], N: int, waypoints: Sequence[Union[int, Sequence[int]]],
                       period: int) -> SensorTrajectory:
    """
    Periodic closed-loop route through lattice waypoints.

    The loop is traversed at constant speed in arc length, one lap per
    `period` snapshots, and positions are rounded to the nearest node.

    Args:
        grid_shape: Lattice shape
        N: Number of time steps
        waypoints: Flat node indices or lattice coordinates; the loop closes
            from the last waypoint back to the first
        period: Snapshots per lap

    Returns:
        SensorTrajectory: Periodic trajectory
    """
    grid_shape = tuple(int(s) for s in grid_shape)
    if not waypoints:
        raise InvalidArgumentError("circuit needs at least one waypoint")
    if not 1 <= period <= N:
        raise InvalidArgumentError(f"period {period} must lie in [1, N={N}]")
    points = np.array([np.unravel_index(int(w), grid_shape) if np.ndim(w) == 0 else tuple(w)
                       for w in waypoints], dtype=np.float64)
    if points.shape[1] != len(grid_shape):
        raise InvalidArgumentError(f"waypoints need {len(grid_shape)} coordinates")
    if np.any(points < 0) or np.any(points >= np.asarray(grid_shape)):
        raise InvalidArgumentError("waypoint outside the lattice")

    loop = np.vstack([points, points[:1]])
    lengths = np.linalg.norm(np.diff(loop, axis=0), axis=1)
    total = lengths.sum()
    lap = np.empty((period, len(grid_shape)))
    if total == 0:
        lap[:] = points[0]
    else:
        cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
        arc = np.arange(period) / period * total
        segment = np.clip(np.searchsorted(cumulative, arc, side="right") - 1, 0, len(lengths) - 1)
        local = (arc - cumulative[segment]) / np.where(lengths[segment] > 0, lengths[segment], 1.0)
        lap = loop[segment] + local[:, None] * (loop[segment + 1] - loop[segment])
    nodes = np.clip(np.rint(lap).astype(np.int64), 0, np.asarray(grid_shape) - 1)
    flat = np.ravel_multi_index(tuple(nodes.T), grid_shape)
    positions = flat[np.arange(N) % period]
    return SensorTrajectory(positions, grid_shape, period=period, name=f"circuit{period}")


def combine_trajectories(*trajectories: SensorTrajectory, name: Optional[str] = None) -> SensorTrajectory:
    """
    Stack several trajectories as parallel sensors.

    Args:
        trajectories: Trajectories on the same lattice

    Returns:
        SensorTrajectory: m = total sensor count; periodic with the least
        common period when every input is periodic
    """
    if not trajectories:
        raise InvalidArgumentError("nothing to combine")
    grid_shape = trajectories[0].grid_shape
    if any(t.grid_shape != grid_shape for t in trajectories):
        raise InvalidArgumentError("trajectories live on different lattices")
    if all(t.periodic for t in trajectories):
        period = lcm(*(t.period for t in trajectories))
        N = max(max(t.N for t in trajectories), period)
    else:
        period = None
        N = min(t.N for t in trajectories if not t.periodic)
    positions = np.hstack([t.span(N) for t in trajectories])
    label = name or "+".join(t.name for t in trajectories)
    return SensorTrajectory(positions, grid_shape, period=period, name=label)


def measurement_matrix(trajectory: SensorTrajectory, n: int, t: int) -> np.ndarray:
    """Explicit m x n selection matrix C_t (rows of the identity)."""
    return np.eye(n)[trajectory.indices_at(t)]


def measure(field: FieldDataset, trajectory: SensorTrajectory, t: int) -> np.ndarray:
    """
    Measurements y_t = C_t x_t.

    Args:
        field: Snapshot dataset
        trajectory: Sensor trajectory
        t: Snapshot index

    Returns:
        np.ndarray: m values in sensor order

    Raises:
        IndexError: if t is outside [0, N)
    """
    if not 0 <= t < field.N:
        raise IndexError(f"time {t} outside [0, {field.N})")
    return field.snapshots[trajectory.indices_at(t), t].copy()


@dataclass(frozen=True)
class WindowSample:
    """One (length-K measurement history, full state) pair ending at snapshot t_index."""
    inputs: np.ndarray
    target: np.ndarray
    t_index: int


@dataclass(frozen=True)
class WindowSet:
    """
    All window samples of one dataset, stored as stacked arrays.

    inputs is S x K x d, targets S x n and t_index holds the end times T.
    """
    inputs: np.ndarray
    targets: np.ndarray
    t_index: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(self.inputs[i], self.targets[i], int(self.t_index[i]))

    def __iter__(self) -> Iterator[WindowSample]:
        return (self[i] for i in range(len(self)))

    @property
    def K(self) -> int:
        return self.inputs.shape[1]

    @property
    def d(self) -> int:
        return self.inputs.shape[2]

    @property
    def n(self) -> int:
        return self.targets.shape[1]

    def select(self, times: np.ndarray) -> "WindowSet":
        """Samples whose end times are in `times`, in the given order."""
        lookup = {int(T): i for i, T in enumerate(self.t_index)}
        try:
            rows = np.array([lookup[int(T)] for T in times], dtype=np.int64)
        except KeyError as e:
            raise InvalidArgumentError(f"no window ends at time {e.args[0]}") from None
        return WindowSet(self.inputs[rows], self.targets[rows], self.t_index[rows])

    def last_step(self) -> np.ndarray:
        """Current measurement only (S x d), the input of memoryless models."""
        return self.inputs[:, -1, :]


def measurement_series(field: FieldDataset, trajectory: SensorTrajectory, coord_channels: bool = False) -> np.ndarray:
    """
    Measurement rows for every snapshot (N x d).

    With coordinate channels each row is [values..., coordinates of sensor 1,
    coordinates of sensor 2, ...] with coordinates normalized per axis.
    """
    positions = trajectory.span(field.N)
    values = field.snapshots[positions, np.arange(field.N)[:, None]]
    if not coord_channels:
        return values
    coords = trajectory.coordinates(field.N).reshape(field.N, -1)
    return np.hstack([values, coords])


def assemble_windows(field: FieldDataset, trajectory: SensorTrajectory, K: int,
                     coord_channels: bool = False) -> WindowSet:
    """
    One window per end time T in [K-1, N-1]; row i holds measure(T-K+1+i).

    Args:
        field: Snapshot dataset
        trajectory: Sensor trajectory covering the dataset
        K: Window length
        coord_channels: Append normalized sensor coordinates to each row

    Returns:
        WindowSet: N-K+1 unscaled samples
    """
    if not 1 <= K <= field.N:
        raise InvalidArgumentError(f"window length K={K} must lie in [1, N={field.N}]")
    if trajectory.n != field.n:
        raise InvalidArgumentError(f"trajectory lattice has {trajectory.n} nodes, field has {field.n}")
    series = measurement_series(field, trajectory, coord_channels)
    windows = np.lib.stride_tricks.sliding_window_view(series, K, axis=0)
    inputs = np.ascontiguousarray(np.transpose(windows, (0, 2, 1)))
    targets = np.ascontiguousarray(field.snapshots[:, K - 1:].T)
    t_index = np.arange(K - 1, field.N)
    logger.debug(f"Assembled {len(t_index)} windows (K={K}, d={inputs.shape[2]})")
    return WindowSet(inputs, targets, t_index)


class PartitionMode(Enum):
    """Random (interpolation) or temporal (extrapolation) splits."""
    RANDOM = "random"
    TEMPORAL = "temporal"


@dataclass(frozen=True)
class Partition:
    """Disjoint train/validation/test sets of window end times."""
    mode: PartitionMode
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int = 0

    def split(self, name: str) -> np.ndarray:
        """End times of the split named train, val or test."""
        if name not in ("train", "val", "test"):
            raise InvalidArgumentError(f"unknown split {name!r}")
        return getattr(self, name)

    def rows(self) -> list:
        """(t_index, split) pairs in time order."""
        labelled = [(int(T), name) for name in ("train", "val", "test") for T in self.split(name)]
        return sorted(labelled)


def partition_windows(samples: WindowSet, mode: Union[PartitionMode, str] = PartitionMode.RANDOM,
                      fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> Partition:
    """
    Split window end times into train, validation and test sets.

    Counts are round(f_train * S) and round(f_val * S) with the remainder to
    test. Random mode shuffles; temporal mode keeps time order.

    Args:
        samples: Window set
        mode: random or temporal
        fractions: Train, validation, test fractions summing to 1
        seed: Shuffle seed

    Returns:
        Partition: Three disjoint, nonempty sets covering all end times
    """
    mode = PartitionMode(mode)
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidArgumentError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    total = len(samples)
    n_train = int(round(fractions[0] * total))
    n_val = int(round(fractions[1] * total))
    n_test = total - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise InvalidArgumentError(
            f"split sizes {n_train}/{n_val}/{n_test} of {total} samples leave a split empty")
    times = np.sort(samples.t_index)
    if mode is PartitionMode.RANDOM:
        times = np.random.default_rng(seed).permutation(times)
        train, val, test = (np.sort(times[:n_train]), np.sort(times[n_train:n_train + n_val]),
                            np.sort(times[n_train + n_val:]))
    else:
        train, val, test = times[:n_train], times[n_train:n_train + n_val], times[n_train + n_val:]
    logger.debug(f"Partitioned {total} windows ({mode.value}): {n_train}/{n_val}/{n_test}")
    return Partition(mode, train, val, test, seed)


def warn_if_extrapolating(trajectory: SensorTrajectory, partition: Partition) -> bool:
    """
    Warn when a temporal split asks the model to extrapolate an unseen path.

    Returns:
        bool: True if a warning was emitted
    """
    if partition.mode is PartitionMode.TEMPORAL and not trajectory.periodic:
        logger.warning(
            f"Temporal partition with non-periodic trajectory '{trajectory.name}': "
            "test windows follow sensor paths never seen in training")
        return True
    return False


@dataclass(frozen=True)
class Scaler:
    """Per-node and per-input-channel min-max constants from the training split."""
    target_min: np.ndarray
    target_max: np.ndarray
    input_min: np.ndarray
    input_max: np.ndarray

    @staticmethod
    def _affine(low: np.ndarray, high: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        span = high - low
        constant = span == 0
        return np.where(constant, 1.0, span), np.where(constant, 0.5, 0.0)

    def scale_targets(self, targets: np.ndarray) -> np.ndarray:
        span, offset = self._affine(self.target_min, self.target_max)
        return (targets - self.target_min) / span + offset

    def unscale_targets(self, scaled: np.ndarray) -> np.ndarray:
        span, offset = self._affine(self.target_min, self.target_max)
        return (scaled - offset) * span + self.target_min

    def scale_inputs(self, inputs: np.ndarray) -> np.ndarray:
        span, offset = self._affine(self.input_min, self.input_max)
        return (inputs - self.input_min) / span + offset

    def unscale_inputs(self, scaled: np.ndarray) -> np.ndarray:
        span, offset = self._affine(self.input_min, self.input_max)
        return (scaled - offset) * span + self.input_min


def fit_scaler(train: WindowSet) -> Scaler:
    """
    Min-max constants from training windows only.

    Args:
        train: Training windows (unscaled)

    Returns:
        Scaler: Maps training ranges to [0, 1]; constant entries map to 0.5
    """
    if len(train) == 0:
        raise InvalidArgumentError("cannot fit a scaler on an empty training set")
    flat_inputs = train.inputs.reshape(-1, train.d)
    return Scaler(train.targets.min(axis=0), train.targets.max(axis=0),
                  flat_inputs.min(axis=0), flat_inputs.max(axis=0))


def apply_scaler(scaler: Scaler, samples: WindowSet) -> WindowSet:
    """Scaled copy of a window set (no clipping)."""
    return WindowSet(scaler.scale_inputs(samples.inputs), scaler.scale_targets(samples.targets), samples.t_index)


def invert_scaler(scaler: Scaler, samples: WindowSet) -> WindowSet:
    """Inverse of `apply_scaler`."""
    return WindowSet(scaler.unscale_inputs(samples.inputs), scaler.unscale_targets(samples.targets),
                     samples.t_index)
