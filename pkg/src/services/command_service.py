"""
Command implementations behind the CLI subcommands.

Each command writes into its own directory below the output root and finishes
with a manifest.json listing every file it produced.
"""

from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import ExperimentConfig
from fieldgen import FieldDataset, generate, generate_gait_cohort
from metrics import compare_distributions, ensemble_mse_distribution, evaluate, pooled_report
from nncore import ShredModel
from sensing import SensorTrajectory, assemble_windows
from services.experiment_service import compare_models, hidden_size_sweep, population_holdout, route_table
from services.run_manifest_service import RunManifest, config_hash
from services.training_service import fit_reconstructor, train_ensemble
from storage import (load_checkpoint, read_partition_csv, read_snapshot_file, read_trajectory_csv, save_checkpoint,
                     write_csv, write_dataset_preview, write_partition_csv, write_snapshot_file,
                     write_train_report_csv, write_trajectory_csv)
from utils.error_handler import DataError, ErrorCollection, InvalidArgumentError, NumericFailure
from utils.imaging import boxplot_figure, histogram_figure, sweep_figure, write_triptych
from utils.logger import logger

DATASET_FILE = "dataset.shrd"
CHECKPOINT_DIR = "checkpoint"
SPLITS = ("train", "val", "test")
TRIPTYCHS = 3


@contextmanager
def _stage(manifest: RunManifest, name: str):
    manifest.start_stage(name)
    try:
        yield
    except Exception as e:
        manifest.complete_stage(name, False, str(e))
        raise
    manifest.complete_stage(name)


def _manifest(config: ExperimentConfig, command: str) -> RunManifest:
    out = config.output_dir / command
    out.mkdir(parents=True, exist_ok=True)
    return RunManifest(command, config_hash(config.data), str(out), config.seed)


def _finish(manifest: RunManifest) -> RunManifest:
    manifest.write()
    manifest.verify()
    logger.info(f"{manifest.command}: wrote {len(manifest.files)} files to {manifest.output_dir}")
    return manifest


def _default_dataset_path(config: ExperimentConfig) -> Path:
    return config.output_dir / "generate" / DATASET_FILE


def load_dataset(config: ExperimentConfig, required: bool) -> FieldDataset:
    """
    Dataset named by `dataset_path`, else the one `generate` wrote, else generated in memory.

    Raises:
        DataError: if `required` and no dataset file exists
    """
    path = config.dataset_path or _default_dataset_path(config)
    if path.exists():
        return read_snapshot_file(path, config.field_spec().dt)
    if required or config.dataset_path is not None:
        raise DataError(f"{path}: dataset file not found (run generate first)")
    logger.info("No dataset file found; generating the configured field in memory")
    return generate(config.field_spec())


def _write_failures(manifest: RunManifest, errors: ErrorCollection):
    if errors.has_errors():
        rows = [(error.source, error.message) for error in errors.errors]
        manifest.add_file(write_csv(Path(manifest.output_dir) / "failures.csv", ["cell", "error"], rows))


def _require_results(produced: int, errors: ErrorCollection, what: str):
    if produced == 0:
        raise NumericFailure(f"every {what} failed: {'; '.join(errors.get_messages())}")


def cmd_generate(config: ExperimentConfig) -> RunManifest:
    """Generate the configured field; writes the SHRD1 snapshot file and a CSV preview."""
    manifest = _manifest(config, "generate")
    out = Path(manifest.output_dir)
    with _stage(manifest, "generate"):
        dataset = generate(config.field_spec())
    with _stage(manifest, "write"):
        manifest.add_file(write_snapshot_file(out / DATASET_FILE, dataset))
        manifest.add_file(write_dataset_preview(out / "dataset_preview.csv", dataset))
    return _finish(manifest)


def cmd_train(config: ExperimentConfig) -> RunManifest:
    """
    Train one reconstructor on the configured trajectory.

    Writes the checkpoint (parameters, scaler constants, model.json), the
    trajectory and partition it was trained on, and the per-epoch report.
    """
    manifest = _manifest(config, "train")
    out = Path(manifest.output_dir)
    checkpoint = out / CHECKPOINT_DIR
    with _stage(manifest, "load"):
        dataset = load_dataset(config, required=True)
        trajectory = config.build_trajectory(dataset)
    setup = config.setup()
    with _stage(manifest, "train"):
        result = fit_reconstructor(dataset, trajectory, setup)
    with _stage(manifest, "write"):
        extra = setup.checkpoint_manifest()
        extra.update({
            "best_val_mse": result.report.best_val_mse,
            "best_epoch": result.report.best_epoch,
            "snapshot_id": result.report.snapshot_id,
            "grid_shape": list(dataset.grid_shape),
        })
        for path in save_checkpoint(checkpoint, result.params, result.data.scaler, extra):
            manifest.add_file(path)
        manifest.add_file(write_trajectory_csv(checkpoint / "trajectory.csv", trajectory))
        manifest.add_file(checkpoint / "trajectory.json")
        manifest.add_file(write_partition_csv(checkpoint / "partition.csv", result.data.partition))
        manifest.add_file(write_train_report_csv(out / "train_report.csv", result.report))
    logger.info(f"Best validation MSE {result.report.best_val_mse:.6g}; test MSE {result.test.mse:.6g}")
    return _finish(manifest)


def _check_compatible(manifest: Dict, dataset: FieldDataset, trajectory: SensorTrajectory):
    if manifest["output_width"] != dataset.n:
        raise DataError(f"checkpoint reconstructs n={manifest['output_width']} nodes, dataset has n={dataset.n}")
    if tuple(manifest.get("grid_shape", dataset.grid_shape)) != dataset.grid_shape:
        raise DataError(f"checkpoint lattice {manifest['grid_shape']} != dataset lattice {list(dataset.grid_shape)}")
    if trajectory.n != dataset.n:
        raise DataError(f"stored trajectory covers {trajectory.n} nodes, dataset has {dataset.n}")
    if int(manifest["K"]) > dataset.N:
        raise DataError(f"checkpoint window K={manifest['K']} exceeds the dataset's {dataset.N} snapshots")


def _write_eval(out: Path, report, manifest: RunManifest, t_index: Optional[np.ndarray] = None, prefix: str = ""):
    if t_index is not None:
        rows = [(int(t), float(mse)) for t, mse in zip(t_index, report.per_sample_mse)]
        manifest.add_file(write_csv(out / f"{prefix}evalreport.csv", ["t_index", "mse"], rows))
    edges = report.bin_edges
    rows = [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(report.counts)]
    manifest.add_file(write_csv(out / f"{prefix}histogram.csv", ["bin_low", "bin_high", "count"], rows))
    summary = [("samples", report.samples), ("mse", report.mse), ("nmse", report.nmse),
               ("mean_error", report.mean_error), ("error_variance", report.error_variance)]
    manifest.add_file(write_csv(out / f"{prefix}summary.csv", ["metric", "value"], summary))


def cmd_eval(config: ExperimentConfig, checkpoint: Optional[Path] = None, split: str = "test",
             figures: bool = False) -> RunManifest:
    """
    Evaluate a checkpoint on one split of its partition.

    Writes evalreport.csv, histogram.csv, summary.csv and three PPM triptychs
    (ground truth, reconstruction, absolute error).
    """
    if split not in SPLITS:
        raise InvalidArgumentError(f"split must be one of {list(SPLITS)}, got {split!r}")
    checkpoint = Path(checkpoint) if checkpoint else config.output_dir / "train" / CHECKPOINT_DIR
    manifest = _manifest(config, "eval")
    out = Path(manifest.output_dir) / split
    with _stage(manifest, "load"):
        params, scaler, model_manifest = load_checkpoint(checkpoint)
        dataset = load_dataset(config, required=True)
        trajectory = read_trajectory_csv(checkpoint / "trajectory.csv")
        partition = read_partition_csv(checkpoint / "partition.csv", model_manifest.get("partition_mode", "random"))
        _check_compatible(model_manifest, dataset, trajectory)
        windows = assemble_windows(dataset, trajectory, int(model_manifest["K"]),
                                   bool(model_manifest["coord_channels"]))
        if windows.d != model_manifest["input_width"]:
            raise DataError(f"checkpoint expects input width {model_manifest['input_width']}, windows have {windows.d}")
        try:
            selected = windows.select(partition.split(split))
        except InvalidArgumentError as e:
            raise DataError(f"stored partition does not match the dataset: {str(e)}") from None
    with _stage(manifest, "evaluate"):
        report = evaluate(ShredModel(params), selected, scaler, keep_arrays=True)
    with _stage(manifest, "write"):
        _write_eval(out, report, manifest, selected.t_index)
        picks = np.unique(np.linspace(0, len(selected) - 1, TRIPTYCHS).round().astype(int))
        for pick in picks:
            path = out / f"snapshot_t{int(selected.t_index[pick]):05d}.ppm"
            write_triptych(path, report.targets[pick], report.predictions[pick], dataset.grid_shape)
            manifest.add_file(path)
        if figures:
            manifest.add_file(histogram_figure(out / "histogram.png", report.bin_edges, report.counts,
                                               f"{split} errors"))
    logger.info(f"{split} split: MSE {report.mse:.6g}, NMSE {report.nmse:.4g}")
    return _finish(manifest)


def cmd_ensemble(config: ExperimentConfig, count: Optional[int] = None, kinds: Optional[Sequence[str]] = None,
                 jobs: int = 1, figures: bool = False) -> RunManifest:
    """
    Train mobile and/or immobile ensembles; write per-model MSEs, box-plot data,
    pooled error histograms and the distribution comparison.
    """
    count = count or config.section("ensemble")["count"]
    kinds = list(kinds or config.section("ensemble")["kinds"])
    manifest = _manifest(config, "ensemble")
    out = Path(manifest.output_dir)
    with _stage(manifest, "load"):
        dataset = load_dataset(config, required=False)
    setup = config.setup()
    results = {}
    errors = ErrorCollection()
    for kind in kinds:
        with _stage(manifest, f"train-{kind}"):
            results[kind] = train_ensemble(dataset, config.ensemble_factory(dataset, kind), count, setup,
                                           config.seed, jobs, label=kind)
        errors.errors.extend(results[kind].errors.errors)
    _require_results(sum(len(r.members) for r in results.values()), errors, "ensemble member")

    with _stage(manifest, "write"):
        rows = [(kind, m.index, m.trajectory, m.test.mse, m.report.best_val_mse, m.report.best_epoch)
                for kind, result in results.items() for m in result.members]
        manifest.add_file(write_csv(out / "ensemble_mse.csv",
                                    ["label", "index", "trajectory", "test_mse", "best_val_mse", "best_epoch"], rows))
        box_rows, pooled = [], {}
        for kind, result in results.items():
            if not result.members:
                continue
            pooled[kind] = pooled_report([m.test for m in result.members])
            _write_eval(out, pooled[kind], manifest, prefix=f"{kind}_")
            if len(result.members) >= 4:
                box = ensemble_mse_distribution(result.test_mses)
                box_rows.append((kind, box.q1, box.median, box.q3, box.whisker_low, box.whisker_high,
                                 len(box.outliers), ";".join(format(v, ".17g") for v in box.outliers)))
            else:
                logger.warning(f"Ensemble {kind} has {len(result.members)} models; box statistics need 4")
        manifest.add_file(write_csv(out / "boxplot.csv", ["label", "q1", "median", "q3", "whisker_low",
                                                          "whisker_high", "outlier_count", "outliers"], box_rows))
        if len(pooled) == 2:
            (label_a, a), (label_b, b) = pooled.items()
            comparison = compare_distributions(a, b)
            manifest.add_file(write_csv(out / "comparison.csv",
                                        ["label_a", "mean_a", "variance_a", "label_b", "mean_b", "variance_b",
                                         "variance_ratio"],
                                        [(label_a, comparison.mean_a, comparison.variance_a, label_b,
                                          comparison.mean_b, comparison.variance_b, comparison.variance_ratio)]))
        _write_failures(manifest, errors)
        if figures:
            manifest.add_file(boxplot_figure(out / "boxplot.png",
                                             {kind: r.test_mses for kind, r in results.items() if r.members},
                                             "ensemble test MSE"))
    return _finish(manifest)


def cmd_sweep(config: ExperimentConfig, widths: Optional[Sequence[int]] = None, jobs: int = 1,
              figures: bool = False) -> RunManifest:
    """Hidden-width sweep; writes sweep.csv, sweep_cells.csv and singular_values.csv."""
    widths = list(widths or config.section("sweep")["widths"])
    manifest = _manifest(config, "sweep")
    out = Path(manifest.output_dir)
    with _stage(manifest, "load"):
        dataset = load_dataset(config, required=False)
        trajectory = config.build_trajectory(dataset)
    with _stage(manifest, "sweep"):
        report = hidden_size_sweep(dataset, trajectory, widths, config.section("sweep")["repeats"], config.setup(),
                                   config.seed, jobs)
    _require_results(len(report.cells), report.errors, "sweep cell")
    with _stage(manifest, "write"):
        manifest.add_file(write_csv(out / "sweep.csv", ["h", "mse"], report.rows()))
        manifest.add_file(write_csv(out / "sweep_cells.csv", ["h", "repeat", "mse"], report.cells))
        manifest.add_file(write_csv(out / "singular_values.csv", ["index", "value"],
                                    [(i, float(v)) for i, v in enumerate(report.singular_values)]))
        _write_failures(manifest, report.errors)
        if figures:
            manifest.add_file(sweep_figure(out / "sweep.png", report.widths, report.mean_mse,
                                           report.singular_values))
    return _finish(manifest)


def cmd_route_table(config: ExperimentConfig, jobs: int = 1) -> RunManifest:
    """One model per (route combination, partition mode); writes route_table.csv."""
    manifest = _manifest(config, "route-table")
    out = Path(manifest.output_dir)
    with _stage(manifest, "load"):
        dataset = load_dataset(config, required=False)
        routes = config.routes(dataset)
        if not routes:
            routes = {"trajectory": config.build_trajectory(dataset)}
    combinations = config.route_combinations() if config.route_specs else [["trajectory"]]
    with _stage(manifest, "routes"):
        table = route_table(dataset, routes, combinations, config.setup(), global_seed=config.seed, jobs=jobs)
    _require_results(len(table.cells), table.errors, "route-table cell")
    with _stage(manifest, "write"):
        manifest.add_file(write_csv(out / "route_table.csv", ["route", "partition", "mse"], table.rows()))
        _write_failures(manifest, table.errors)
    return _finish(manifest)


def cmd_baselines(config: ExperimentConfig, jobs: int = 1) -> RunManifest:
    """SHRED vs SDN vs linear map; writes MSE mean and standard deviation per model."""
    manifest = _manifest(config, "baselines")
    out = Path(manifest.output_dir)
    section = config.section("baselines")
    with _stage(manifest, "load"):
        dataset = load_dataset(config, required=False)
        trajectory = config.build_trajectory(dataset)
    with _stage(manifest, "compare"):
        comparison = compare_models(dataset, trajectory, config.setup(), section["seeds"], section["ridge"],
                                    section["lagged_linear"], config.seed, jobs)
    _require_results(len(comparison.mses["shred"]), comparison.errors, "baseline run")
    with _stage(manifest, "write"):
        manifest.add_file(write_csv(out / "baselines.csv", ["model", "mse_mean", "mse_sd", "runs"],
                                    comparison.summary()))
        runs = [(kind, i, mse) for kind, values in comparison.mses.items() for i, mse in enumerate(values)]
        manifest.add_file(write_csv(out / "baselines_runs.csv", ["model", "run", "mse"], runs))
        _write_failures(manifest, comparison.errors)
    return _finish(manifest)


def cmd_population(config: ExperimentConfig, jobs: int = 1) -> RunManifest:
    """Hold-out evaluation over a generated gait cohort; writes per-subject and summary MSEs."""
    manifest = _manifest(config, "population")
    out = Path(manifest.output_dir)
    section = config.section("population")
    with _stage(manifest, "generate"):
        cohort = generate_gait_cohort(config.field_spec(), section["subjects"])
        trajectory = config.build_trajectory(cohort[0])
    with _stage(manifest, "holdout"):
        cells, errors = population_holdout(cohort, trajectory, config.setup(), section["holdouts"],
                                           config.section("baselines")["ridge"], config.seed, jobs)
    _require_results(len(cells), errors, "hold-out subject")
    with _stage(manifest, "write"):
        manifest.add_file(write_csv(out / "population.csv", ["subject", "model", "mse"],
                                    [(c.subject, c.model, c.mse) for c in cells]))
        summary: Dict[str, List[float]] = {}
        for cell in cells:
            summary.setdefault(cell.model, []).append(cell.mse)
        rows = [(model, float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, len(v))
                for model, v in summary.items()]
        manifest.add_file(write_csv(out / "population_summary.csv", ["model", "mse_mean", "mse_sd", "runs"], rows))
        _write_failures(manifest, errors)
    return _finish(manifest)
