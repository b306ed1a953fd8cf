"""
File formats: binary snapshot and array containers, checkpoints, and CSV exports.

Snapshot file (SHRD1): magic, u32 axis count, u32 per axis, u32 N, then n x N
float64 values snapshot by snapshot. Array container (SHRP1 parameters, SHRL1
linear models): magic, u32 array count, then per array u32 name length, UTF-8
name, u32 ndim, u32 per dimension and C-order float64 payload. All integers
and floats are little-endian.
"""

import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from baselines import LinearModel
from fieldgen import FieldDataset
from nncore import ShredParams
from optimizer import TrainReport
from sensing import Partition, PartitionMode, Scaler, SensorTrajectory
from utils.error_handler import DataError, handle_errors
from utils.logger import logger

SNAPSHOT_MAGIC = b"SHRD1"
PARAMS_MAGIC = b"SHRP1"
LINEAR_MAGIC = b"SHRL1"

PathLike = Union[str, Path]


def _u32(*values: int) -> bytes:
    return np.asarray(values, dtype="<u4").tobytes()


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes, path: PathLike):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise DataError(f"{self.path}: truncated file")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, count: int = 1) -> Tuple[int, ...]:
        return tuple(int(v) for v in np.frombuffer(self.take(4 * count), dtype="<u4"))

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def expect_magic(self, magic: bytes):
        if self.take(len(magic)) != magic:
            raise DataError(f"{self.path}: not a {magic.decode()} file")

    def finish(self):
        if self.offset != len(self.data):
            raise DataError(f"{self.path}: {len(self.data) - self.offset} trailing bytes")


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    return path.read_bytes()


@handle_errors
def write_snapshot_file(path: PathLike, dataset: FieldDataset) -> Path:
    """
    Write a dataset in the SHRD1 binary format.

    Args:
        path: Destination file
        dataset: Field to store

    Returns:
        Path: The written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = SNAPSHOT_MAGIC + _u32(len(dataset.grid_shape)) + _u32(*dataset.grid_shape) + _u32(dataset.N)
    payload = np.ascontiguousarray(dataset.snapshots.T, dtype="<f8").tobytes()
    path.write_bytes(header + payload)
    logger.debug(f"Wrote snapshot file {path} ({dataset.n} x {dataset.N})")
    return path


def read_snapshot_file(path: PathLike, dt: float = 1.0) -> FieldDataset:
    """
    Read a SHRD1 file.

    Raises:
        DataError: on a missing, truncated or foreign file
    """
    reader = _Reader(_read_bytes(path), path)
    reader.expect_magic(SNAPSHOT_MAGIC)
    (axes,) = reader.u32()
    grid_shape = reader.u32(axes)
    (N,) = reader.u32()
    n = int(np.prod(grid_shape))
    values = reader.f64(n * N)
    reader.finish()
    return FieldDataset(values.reshape(N, n).T, grid_shape, dt, Path(path).stem)


def write_arrays(path: PathLike, magic: bytes, arrays: Dict[str, np.ndarray]) -> Path:
    """Write named float64 arrays in the shared container format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [magic, _u32(len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array, dtype=np.float64)
        chunks += [_u32(len(encoded)), encoded, _u32(array.ndim), _u32(*array.shape),
                   np.ascontiguousarray(array, dtype="<f8").tobytes()]
    path.write_bytes(b"".join(chunks))
    return path


def read_arrays(path: PathLike, magic: bytes) -> Dict[str, np.ndarray]:
    """Read a named-array container written by `write_arrays`."""
    reader = _Reader(_read_bytes(path), path)
    reader.expect_magic(magic)
    (count,) = reader.u32()
    arrays = {}
    for _ in range(count):
        (length,) = reader.u32()
        name = reader.take(length).decode("utf-8")
        (ndim,) = reader.u32()
        shape = reader.u32(ndim) if ndim else ()
        arrays[name] = reader.f64(int(np.prod(shape))).reshape(shape)
    reader.finish()
    return arrays


def scaler_arrays(scaler: Scaler) -> Dict[str, np.ndarray]:
    return {f"scaler.{key}": getattr(scaler, key)
            for key in ("target_min", "target_max", "input_min", "input_max")}


def scaler_from_arrays(arrays: Dict[str, np.ndarray]) -> Scaler:
    try:
        return Scaler(*(arrays[f"scaler.{key}"] for key in ("target_min", "target_max", "input_min", "input_max")))
    except KeyError as e:
        raise DataError(f"checkpoint is missing {e.args[0]}") from None


@handle_errors
def save_checkpoint(directory: PathLike, params: ShredParams, scaler: Scaler, manifest: Dict) -> List[Path]:
    """
    Store parameters plus scaler constants (SHRP1) and a JSON hyperparameter manifest.

    Args:
        directory: Checkpoint directory
        params: Trained parameters
        scaler: Scaler fitted on the training split
        manifest: Extra hyperparameters (K, coord_channels, ...)

    Returns:
        List[Path]: The parameter file and the manifest file
    """
    directory = Path(directory)
    arrays = dict(params.named_arrays())
    arrays.update(scaler_arrays(scaler))
    params_path = write_arrays(directory / "params.shrp", PARAMS_MAGIC, arrays)
    hyper = dict(params.hyperparameters())
    hyper.update(manifest)
    hyper["scaler"] = {key: getattr(scaler, key).tolist()
                       for key in ("target_min", "target_max", "input_min", "input_max")}
    manifest_path = directory / "model.json"
    manifest_path.write_text(json.dumps(hyper, indent=2, sort_keys=True), encoding="utf-8")
    return [params_path, manifest_path]


def load_checkpoint(directory: PathLike) -> Tuple[ShredParams, Scaler, Dict]:
    """
    Load a checkpoint written by `save_checkpoint`.

    Raises:
        DataError: if files are missing or inconsistent
    """
    directory = Path(directory)
    manifest_path = directory / "model.json"
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: file not found")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    arrays = read_arrays(directory / "params.shrp", PARAMS_MAGIC)
    params = ShredParams.from_named_arrays(arrays, bool(manifest.get("final_activation", False)))
    if params.hyperparameters()["hidden"] != manifest.get("hidden"):
        raise DataError(f"{directory}: parameter arrays disagree with model.json")
    return params, scaler_from_arrays(arrays), manifest


def save_linear_model(path: PathLike, model: LinearModel) -> Path:
    """Store a linear baseline in the SHRL1 container."""
    arrays = dict(model.named_arrays())
    arrays["ridge"] = np.array(model.ridge)
    arrays["lagged"] = np.array(float(model.lagged))
    return write_arrays(path, LINEAR_MAGIC, arrays)


def load_linear_model(path: PathLike) -> LinearModel:
    arrays = read_arrays(path, LINEAR_MAGIC)
    return LinearModel(arrays["weights"], arrays["intercept"], float(arrays["ridge"]), bool(arrays["lagged"]))


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write rows with a header; floats use a fixed round-trip format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_dataset_preview(path: PathLike, dataset: FieldDataset, max_rows: int = 100) -> Path:
    """One row per snapshot with a header of node indices."""
    rows = (dataset.snapshots[:, t] for t in range(min(dataset.N, max_rows)))
    return write_csv(path, [str(i) for i in range(dataset.n)], ([float(v) for v in row] for row in rows))


def write_trajectory_csv(path: PathLike, trajectory: SensorTrajectory) -> Path:
    """Columns t, sensor_id, node_index; the period and lattice go in a sidecar JSON."""
    rows = ((t, sensor, int(trajectory.positions[t, sensor]))
            for t in range(trajectory.N) for sensor in range(trajectory.m))
    path = write_csv(path, ["t", "sensor_id", "node_index"], rows)
    meta = {"grid_shape": list(trajectory.grid_shape), "period": trajectory.period, "name": trajectory.name}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return path


def read_trajectory_csv(path: PathLike) -> SensorTrajectory:
    header, rows = read_csv(path)
    if header != ["t", "sensor_id", "node_index"]:
        raise DataError(f"{path}: unexpected trajectory header {header}")
    meta_path = Path(path).with_suffix(".json")
    if not meta_path.exists():
        raise DataError(f"{meta_path}: file not found")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if not rows:
        raise DataError(f"{path}: trajectory has no rows")
    try:
        data = np.array([[int(v) for v in row] for row in rows], dtype=np.int64)
    except ValueError as e:
        raise DataError(f"{path}: malformed trajectory row: {e}")
    if data.ndim != 2 or data.shape[1] != 3:
        raise DataError(f"{path}: expected three columns per row")
    N, m = data[:, 0].max() + 1, data[:, 1].max() + 1
    positions = np.empty((N, m), dtype=np.int64)
    positions[data[:, 0], data[:, 1]] = data[:, 2]
    return SensorTrajectory(positions, tuple(meta["grid_shape"]), meta["period"], meta.get("name", "trajectory"))


def write_partition_csv(path: PathLike, partition: Partition) -> Path:
    path = write_csv(path, ["t_index", "split"], partition.rows())
    return path


def read_partition_csv(path: PathLike, mode: str = PartitionMode.RANDOM.value) -> Partition:
    header, rows = read_csv(path)
    if header != ["t_index", "split"]:
        raise DataError(f"{path}: unexpected partition header {header}")
    splits = {"train": [], "val": [], "test": []}
    for t_index, split in rows:
        if split not in splits:
            raise DataError(f"{path}: unknown split {split!r}")
        splits[split].append(int(t_index))
    return Partition(PartitionMode(mode), *(np.array(splits[s], dtype=np.int64) for s in ("train", "val", "test")))


def write_train_report_csv(path: PathLike, report: TrainReport) -> Path:
    return write_csv(path, ["epoch", "train_loss", "val_mse"], report.rows())
