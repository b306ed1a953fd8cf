"""
Service running multi-model experiments: hidden-size sweeps, route tables,
the decoupled-field check, model comparisons and population hold-out.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from baselines import fit_linear, fit_sdn
from fieldgen import FieldDataset, half_masks
from metrics import evaluate, singular_spectrum
from sensing import PartitionMode, SensorTrajectory, assemble_windows, combine_trajectories
from services.training_service import (PreparedData, ReconstructionSetup, fit_prepared, fit_reconstructor,
                                       prepare_pooled, prepare_windows)
from utils.error_handler import ErrorCollection, InvalidArgumentError, ShredError
from utils.logger import logger

MODEL_KINDS = ("shred", "sdn", "linear")


def _guarded(func: Callable, *args):
    try:
        return func(*args), None
    except ShredError as e:
        return None, f"{type(e).__name__}: {str(e)}"


def run_cells(func: Callable, tasks: Sequence[Tuple], labels: Sequence[str], errors: ErrorCollection,
              jobs: int = 1) -> List:
    """
    Run independent cells, serially or on a process pool, preserving task order.

    Failed cells yield None and are recorded in `errors` under their label.
    """
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_guarded, [func] * len(tasks), *zip(*tasks)))
    else:
        outcomes = [_guarded(func, *task) for task in tasks]
    values = []
    for label, (value, error) in zip(labels, outcomes):
        if error is not None:
            errors.add(error, label)
            logger.warning(f"Cell {label} failed: {error}")
        values.append(value)
    return values


@dataclass
class SweepReport:
    """Mean test MSE per hidden width and the singular spectrum of the training snapshots."""
    widths: List[int]
    mean_mse: List[float]
    singular_values: np.ndarray
    cells: List[Tuple[int, int, float]] = field(default_factory=list)
    errors: ErrorCollection = field(default_factory=ErrorCollection)

    def rows(self) -> List[Tuple[int, float]]:
        return list(zip(self.widths, self.mean_mse))


def _sweep_cell(dataset: FieldDataset, trajectory: SensorTrajectory, setup: ReconstructionSetup) -> float:
    return fit_reconstructor(dataset, trajectory, setup).test.mse


def hidden_size_sweep(dataset: FieldDataset, trajectory: SensorTrajectory, widths: Sequence[int], repeats: int,
                      setup: ReconstructionSetup, global_seed: int = 0, jobs: int = 1) -> SweepReport:
    """
    Test MSE against LSTM hidden width.

    Each (width, repeat) cell trains its own model; repeat r uses the same
    partition and seeds for every width.

    Args:
        dataset: Snapshot dataset
        trajectory: Sensor trajectory
        widths: Hidden widths to try (nonempty)
        repeats: Models per width
        setup: Shared settings; `hidden` is overridden per cell
        global_seed: Experiment seed
        jobs: Worker processes

    Returns:
        SweepReport: Mean MSE per width (NaN if every repeat failed) and singular values
    """
    widths = [int(h) for h in widths]
    if not widths or any(h < 1 for h in widths):
        raise InvalidArgumentError(f"widths must be a nonempty list of positive integers, got {widths}")
    if repeats < 1:
        raise InvalidArgumentError(f"repeats must be >= 1, got {repeats}")
    tasks, labels, keys = [], [], []
    for h in widths:
        for r in range(repeats):
            tasks.append((dataset, trajectory, setup.seeded(global_seed, r).with_hidden(h)))
            labels.append(f"sweep[h={h},repeat={r}]")
            keys.append((h, r))
    report = SweepReport(widths, [], np.array([]))
    values = run_cells(_sweep_cell, tasks, labels, report.errors, jobs)
    for (h, r), mse in zip(keys, values):
        if mse is not None:
            report.cells.append((h, r, mse))
    for h in widths:
        mses = [mse for width, _, mse in report.cells if width == h]
        report.mean_mse.append(float(np.mean(mses)) if mses else float("nan"))

    data = prepare_windows(dataset, trajectory, setup.seeded(global_seed, 0))
    report.singular_values = singular_spectrum(data.split("train").targets.T)
    logger.info(f"Sweep over widths {widths}: mean MSE {[f'{m:.3g}' for m in report.mean_mse]}")
    return report


@dataclass(frozen=True)
class RouteCell:
    """Test MSE of one route combination under one partition mode."""
    route: str
    partition: str
    mse: float


@dataclass
class RouteTable:
    cells: List[RouteCell] = field(default_factory=list)
    errors: ErrorCollection = field(default_factory=ErrorCollection)

    def rows(self) -> List[Tuple[str, str, float]]:
        return [(c.route, c.partition, c.mse) for c in self.cells]

    def mse(self, route: str, partition: str) -> Optional[float]:
        for cell in self.cells:
            if cell.route == route and cell.partition == partition:
                return cell.mse
        return None


def route_table(dataset: FieldDataset, routes: Dict[str, SensorTrajectory], combinations: Sequence[Sequence[str]],
                setup: ReconstructionSetup, modes: Sequence[str] = ("random", "temporal"),
                global_seed: int = 0, jobs: int = 1) -> RouteTable:
    """
    Train one model per (route combination, partition mode) cell.

    A combination of several routes measures them as parallel sensors.

    Args:
        dataset: Snapshot dataset
        routes: Named trajectories
        combinations: Lists of route names; each list is one table row
        setup: Shared settings
        modes: Partition modes (table columns)
        global_seed: Experiment seed
        jobs: Worker processes

    Returns:
        RouteTable: Cells in row-major order; failed cells are recorded, not listed
    """
    tasks, labels, keys = [], [], []
    for row, names in enumerate(combinations):
        missing = [name for name in names if name not in routes]
        if missing or not names:
            raise InvalidArgumentError(f"route combination {list(names)} names unknown routes {missing}")
        label = "+".join(names)
        trajectory = routes[names[0]] if len(names) == 1 else combine_trajectories(
            *(routes[name] for name in names), name=label)
        for mode in modes:
            cell_setup = setup.seeded(global_seed, row).with_partition(mode)
            tasks.append((dataset, trajectory, cell_setup))
            labels.append(f"routes[{label},{PartitionMode(mode).value}]")
            keys.append((label, PartitionMode(mode).value))
    table = RouteTable()
    for (route, mode), mse in zip(keys, run_cells(_sweep_cell, tasks, labels, table.errors, jobs)):
        if mse is not None:
            table.cells.append(RouteCell(route, mode, mse))
    logger.info(f"Route table: {len(table.cells)}/{len(tasks)} cells")
    return table


@dataclass(frozen=True)
class DecoupledReport:
    observed_half: str
    observed_nmse: float
    unobserved_nmse: float


def decoupled_sanity(dataset: FieldDataset, trajectory: SensorTrajectory,
                     setup: ReconstructionSetup) -> DecoupledReport:
    """
    Train on a decoupled field with sensors confined to one half; NMSE per half.

    Raises:
        InvalidArgumentError: if the trajectory visits both halves
    """
    left, right = half_masks(dataset.grid_shape)
    visited = np.unique(trajectory.span(dataset.N))
    if np.all(left[visited]):
        observed, unobserved, name = left, right, "left"
    elif np.all(right[visited]):
        observed, unobserved, name = right, left, "right"
    else:
        raise InvalidArgumentError(f"trajectory '{trajectory.name}' leaves its half of the domain")
    result = fit_reconstructor(dataset, trajectory, setup)
    test = result.data.split("test")
    model = result.model
    report = DecoupledReport(
        name,
        evaluate(model, test, result.data.scaler, nodes=observed).nmse,
        evaluate(model, test, result.data.scaler, nodes=unobserved).nmse,
    )
    logger.info(f"Decoupled check ({name} half observed): NMSE {report.observed_nmse:.4g} observed, "
                f"{report.unobserved_nmse:.4g} unobserved")
    return report


def _fit_models(data: PreparedData, setup: ReconstructionSetup, linear_ridge: float,
                lagged_linear: bool) -> Dict[str, Callable]:
    """SHRED, SDN and linear models trained on the same split."""
    shred = fit_prepared(data, setup).model
    sdn, _ = fit_sdn(data.scaled, data.partition, setup.decoder_widths, setup.training, setup.init_seed,
                     setup.final_activation)
    train = data.split("train", scaled=True)
    linear = fit_linear(train.inputs, train.targets, linear_ridge, lagged_linear)
    return {"shred": shred, "sdn": sdn, "linear": linear}


def _comparison_cell(dataset: FieldDataset, trajectory: SensorTrajectory, setup: ReconstructionSetup,
                     linear_ridge: float, lagged_linear: bool) -> Dict[str, float]:
    data = prepare_windows(dataset, trajectory, setup)
    models = _fit_models(data, setup, linear_ridge, lagged_linear)
    test = data.split("test")
    return {kind: evaluate(model, test, data.scaler).mse for kind, model in models.items()}


@dataclass
class ModelComparison:
    """Per-seed test MSEs of each model kind."""
    mses: Dict[str, List[float]] = field(default_factory=lambda: {kind: [] for kind in MODEL_KINDS})
    errors: ErrorCollection = field(default_factory=ErrorCollection)

    def summary(self) -> List[Tuple[str, float, float, int]]:
        """(model, mean MSE, sample standard deviation, runs) per model kind."""
        rows = []
        for kind, values in self.mses.items():
            values = np.asarray(values)
            sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
            rows.append((kind, float(np.mean(values)) if values.size else float("nan"), sd, int(values.size)))
        return rows


def compare_models(dataset: FieldDataset, trajectory: SensorTrajectory, setup: ReconstructionSetup, seeds: int = 3,
                   linear_ridge: float = 1e-8, lagged_linear: bool = False, global_seed: int = 0,
                   jobs: int = 1) -> ModelComparison:
    """
    SHRED against the shallow decoder and the linear map over several seeds.

    Every seed draws one partition shared by the three models.
    """
    if seeds < 1:
        raise InvalidArgumentError(f"seeds must be >= 1, got {seeds}")
    tasks = [(dataset, trajectory, setup.seeded(global_seed, s), linear_ridge, lagged_linear) for s in range(seeds)]
    comparison = ModelComparison()
    labels = [f"baselines[seed={s}]" for s in range(seeds)]
    for cell in run_cells(_comparison_cell, tasks, labels, comparison.errors, jobs):
        if cell is not None:
            for kind, mse in cell.items():
                comparison.mses[kind].append(mse)
    for kind, mean, sd, runs in comparison.summary():
        logger.info(f"{kind}: MSE {mean:.4g} +- {sd:.2g} over {runs} runs")
    return comparison


@dataclass(frozen=True)
class PopulationCell:
    """Test MSE on one held-out subject for one model."""
    subject: int
    model: str
    mse: float


def _population_cell(cohort: Sequence[FieldDataset], subject: int, trajectory: SensorTrajectory,
                     setup: ReconstructionSetup, linear_ridge: float) -> List[PopulationCell]:
    others = [dataset for i, dataset in enumerate(cohort) if i != subject]
    pooled = prepare_pooled(others, trajectory, setup)
    models = _fit_models(pooled, setup, linear_ridge, False)
    held_out = assemble_windows(cohort[subject], trajectory, setup.K, setup.coord_channels)
    cells = [PopulationCell(subject, f"population-{kind}", evaluate(model, held_out, pooled.scaler).mse)
             for kind, model in models.items()]
    individual = fit_reconstructor(cohort[subject], trajectory, setup)
    cells.append(PopulationCell(subject, "individual-shred", individual.test.mse))
    return cells


def population_holdout(cohort: Sequence[FieldDataset], trajectory: SensorTrajectory, setup: ReconstructionSetup,
                       holdouts: Sequence[int], linear_ridge: float = 1e-8, global_seed: int = 0,
                       jobs: int = 1) -> Tuple[List[PopulationCell], ErrorCollection]:
    """
    Train on all subjects but one, test on the held-out subject.

    Population models (SHRED, SDN, linear) see every window of the held-out
    subject at test time; the individual SHRED model is trained and tested on
    that subject's own random partition for reference.

    Args:
        cohort: One dataset per subject, all on the same lattice
        trajectory: Sensor placement shared by the cohort
        setup: Shared settings
        holdouts: Subject indices to hold out in turn
        linear_ridge: Ridge weight of the linear model
        global_seed: Experiment seed
        jobs: Worker processes

    Returns:
        Tuple of cells (subject, model, MSE) and recorded failures
    """
    if len(cohort) < 2:
        raise InvalidArgumentError(f"need at least 2 subjects, got {len(cohort)}")
    for subject in holdouts:
        if not 0 <= subject < len(cohort):
            raise InvalidArgumentError(f"hold-out subject {subject} outside [0, {len(cohort)})")
    errors = ErrorCollection()
    tasks = [(cohort, s, trajectory, setup.seeded(global_seed, s), linear_ridge) for s in holdouts]
    labels = [f"population[subject={s}]" for s in holdouts]
    cells = [cell for group in run_cells(_population_cell, tasks, labels, errors, jobs) if group for cell in group]
    logger.info(f"Population hold-out: {len(cells)} cells over {len(holdouts)} subjects")
    return cells, errors
