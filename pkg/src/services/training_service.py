"""
Service composing windowing, scaling, training and evaluation into single fits and ensembles.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from fieldgen import FieldDataset
from metrics import EvalReport, evaluate
from nncore import DEFAULT_DECODER_WIDTHS, DEFAULT_HIDDEN, ShredModel, ShredParams, init_params
from optimizer import TrainConfig, TrainReport, train
from sensing import (Partition, PartitionMode, Scaler, SensorTrajectory, WindowSet, apply_scaler,
                     assemble_windows, fit_scaler, partition_windows, warn_if_extrapolating)
from utils.error_handler import ConfigError, ErrorCollection, ShredError
from utils.logger import logger
from utils.seeding import stage_seed


@dataclass(frozen=True)
class ReconstructionSetup:
    """Window, model, partition and training settings shared by every fit of an experiment."""
    K: int = 50
    hidden: int = DEFAULT_HIDDEN
    layers: int = 1
    decoder_widths: Tuple[int, ...] = DEFAULT_DECODER_WIDTHS
    coord_channels: bool = False
    final_activation: bool = False
    training: TrainConfig = field(default_factory=TrainConfig)
    partition_mode: PartitionMode = PartitionMode.RANDOM
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    partition_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "partition_mode", PartitionMode(self.partition_mode))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if self.K < 1:
            raise ConfigError("window.K", f"must be >= 1, got {self.K}")
        if self.hidden < 1:
            raise ConfigError("model.hidden", f"must be >= 1, got {self.hidden}")
        if self.layers < 1:
            raise ConfigError("model.layers", f"must be >= 1, got {self.layers}")
        if any(w < 1 for w in self.decoder_widths):
            raise ConfigError("model.decoder_widths", f"widths must be >= 1, got {list(self.decoder_widths)}")
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions) or abs(sum(self.fractions) - 1) > 1e-9:
            raise ConfigError("partition.fractions", f"need three positive fractions summing to 1, got {self.fractions}")

    def seeded(self, global_seed: int, index: int = 0) -> "ReconstructionSetup":
        """Copy with partition, initialization and shuffling seeds fanned out from `global_seed`."""
        return replace(
            self,
            partition_seed=stage_seed(global_seed, "partition", index),
            init_seed=stage_seed(global_seed, "init", index),
            training=replace(self.training, seed=stage_seed(global_seed, "train", index)),
        )

    def with_partition(self, mode) -> "ReconstructionSetup":
        return replace(self, partition_mode=PartitionMode(mode))

    def with_hidden(self, hidden: int) -> "ReconstructionSetup":
        return replace(self, hidden=hidden)

    def checkpoint_manifest(self) -> dict:
        """Settings a checkpoint needs to rebuild windows for evaluation."""
        return {
            "K": self.K,
            "coord_channels": self.coord_channels,
            "loss_kind": self.training.loss_kind,
            "partition_mode": self.partition_mode.value,
        }


@dataclass
class PreparedData:
    """Unscaled and scaled windows of one dataset with their partition and scaler."""
    raw: WindowSet
    scaled: WindowSet
    partition: Partition
    scaler: Scaler

    def split(self, name: str, scaled: bool = False) -> WindowSet:
        windows = self.scaled if scaled else self.raw
        return windows.select(self.partition.split(name))


def concatenate_windows(window_sets: Sequence[WindowSet]) -> WindowSet:
    """Stack window sets of several datasets; end times are renumbered 0..S-1."""
    inputs = np.concatenate([w.inputs for w in window_sets])
    targets = np.concatenate([w.targets for w in window_sets])
    return WindowSet(inputs, targets, np.arange(len(inputs)))


def prepare_windows(dataset: FieldDataset, trajectory: SensorTrajectory, setup: ReconstructionSetup) -> PreparedData:
    """
    Assemble windows, partition them and scale with constants from the training split.

    Args:
        dataset: Snapshot dataset
        trajectory: Sensor trajectory covering the dataset
        setup: Window and partition settings

    Returns:
        PreparedData: Raw and scaled windows with partition and scaler
    """
    raw = assemble_windows(dataset, trajectory, setup.K, setup.coord_channels)
    partition = partition_windows(raw, setup.partition_mode, setup.fractions, setup.partition_seed)
    warn_if_extrapolating(trajectory, partition)
    return _scaled(raw, partition)


def prepare_pooled(datasets: Sequence[FieldDataset], trajectory: SensorTrajectory,
                   setup: ReconstructionSetup) -> PreparedData:
    """Windows of several datasets pooled into one randomly partitioned set."""
    raw = concatenate_windows([assemble_windows(d, trajectory, setup.K, setup.coord_channels) for d in datasets])
    partition = partition_windows(raw, PartitionMode.RANDOM, setup.fractions, setup.partition_seed)
    return _scaled(raw, partition)


def _scaled(raw: WindowSet, partition: Partition) -> PreparedData:
    scaler = fit_scaler(raw.select(partition.train))
    return PreparedData(raw, apply_scaler(scaler, raw), partition, scaler)


@dataclass
class FitResult:
    """Trained recurrent model with its training curves and test-split evaluation."""
    params: ShredParams
    report: TrainReport
    data: PreparedData
    test: EvalReport

    @property
    def model(self) -> ShredModel:
        return ShredModel(self.params)


def fit_prepared(data: PreparedData, setup: ReconstructionSetup, keep_arrays: bool = False) -> FitResult:
    """Initialize, train and evaluate on already prepared windows."""
    params = init_params(setup.hidden, data.raw.d, data.raw.n, setup.decoder_widths, setup.layers,
                         setup.init_seed, setup.final_activation)
    best, report = train(data.scaled, data.partition, params, setup.training)
    test = evaluate(ShredModel(best), data.split("test"), data.scaler, keep_arrays=keep_arrays)
    return FitResult(best, report, data, test)


def fit_reconstructor(dataset: FieldDataset, trajectory: SensorTrajectory, setup: ReconstructionSetup,
                      keep_arrays: bool = False) -> FitResult:
    """
    Train one recurrent reconstructor end to end.

    Args:
        dataset: Snapshot dataset
        trajectory: Sensor trajectory
        setup: Experiment settings (seeds included)
        keep_arrays: Keep test predictions on the evaluation report

    Returns:
        FitResult: Best parameters, training report and test evaluation
    """
    data = prepare_windows(dataset, trajectory, setup)
    result = fit_prepared(data, setup, keep_arrays)
    logger.info(f"Fitted h={setup.hidden} on '{trajectory.name}': test MSE {result.test.mse:.6g}")
    return result


@dataclass
class EnsembleMember:
    """One trained model of an ensemble."""
    index: int
    trajectory: str
    params: ShredParams
    report: TrainReport
    test: EvalReport


@dataclass
class EnsembleResult:
    """Members in index order; failed indices are recorded in `errors`."""
    label: str
    members: List[EnsembleMember] = field(default_factory=list)
    errors: ErrorCollection = field(default_factory=ErrorCollection)

    @property
    def test_mses(self) -> List[float]:
        return [member.test.mse for member in self.members]


def _fit_member(index: int, dataset: FieldDataset, trajectory: SensorTrajectory,
                setup: ReconstructionSetup) -> Tuple[int, Optional[EnsembleMember], Optional[str]]:
    try:
        result = fit_reconstructor(dataset, trajectory, setup, keep_arrays=True)
    except ShredError as e:
        return index, None, f"{type(e).__name__}: {str(e)}"
    return index, EnsembleMember(index, trajectory.name, result.params, result.report, result.test), None


def train_ensemble(dataset: FieldDataset, trajectory_factory: Callable[[int], SensorTrajectory], count: int,
                   setup: ReconstructionSetup, global_seed: int = 0, jobs: int = 1,
                   label: str = "ensemble") -> EnsembleResult:
    """
    Train `count` independent models, each with its own trajectory and seeds.

    Trajectories are drawn in the calling process in index order, so results
    do not depend on `jobs`. A failing member is recorded and skipped.

    Args:
        dataset: Snapshot dataset shared by all members
        trajectory_factory: Maps a member index to a freshly seeded trajectory
        count: Number of models (>= 1)
        setup: Experiment settings; seeds are fanned out per member
        global_seed: Experiment seed
        jobs: Worker processes (1 runs serially)
        label: Name used in logs and outputs

    Returns:
        EnsembleResult: Members ordered by index plus recorded failures
    """
    if count < 1:
        raise ConfigError("ensemble.count", f"must be >= 1, got {count}")
    tasks = [(i, dataset, trajectory_factory(i), setup.seeded(global_seed, i)) for i in range(count)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_fit_member, *zip(*tasks)))
    else:
        outcomes = [_fit_member(*task) for task in tasks]

    result = EnsembleResult(label)
    for index, member, error in sorted(outcomes, key=lambda outcome: outcome[0]):
        if member is None:
            result.errors.add(error, f"{label}[{index}]")
            logger.warning(f"Ensemble {label} member {index} failed: {error}")
        else:
            result.members.append(member)
    logger.info(f"Ensemble {label}: {len(result.members)}/{count} models trained")
    return result
