"""
Experiment configuration: one JSON file describes one reproducible experiment.
"""

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from fieldgen import FieldDataset, FieldKind, FieldSpec, InitialCondition
from nncore import DEFAULT_DECODER_WIDTHS, DEFAULT_HIDDEN, LossKind
from optimizer import TrainConfig
from resources import output_root
from sensing import (DEFAULT_STEP_INTERVAL, PartitionMode, SensorTrajectory, circuit_trajectory, fixed_trajectory,
                     immobile_trajectory, random_walk_trajectory)
from services.training_service import ReconstructionSetup
from utils.error_handler import ConfigError, ShredError
from utils.logger import logger
from utils.seeding import stage_seed

TRAJECTORY_KINDS = ("immobile", "random_walk", "circuit", "fixed")
ENSEMBLE_KINDS = ("mobile", "immobile")

TRAJECTORY_DEFAULTS = {
    "kind": "random_walk",
    "m": 1,
    "step_interval": DEFAULT_STEP_INTERVAL,
    "waypoints": [],
    "period": None,
    "indices": [],
    "seed": None,
}

DEFAULTS = {
    "seed": 0,
    "output_dir": None,
    "dataset_path": None,
    "field": {
        "kind": "lowrank",
        "grid_shape": [20, 20],
        "N": 1200,
        "rank": 5,
        "frequencies": None,
        "amplitudes": None,
        "partner_amplitudes": None,
        "diffusivity": 0.05,
        "initial_condition": "smooth",
        "initial_value": 1.0,
        "stride_period": 50.0,
        "jitter": 0.0,
        "mirror_channels": [],
        "dt": 1.0,
        "noise_std": None,
        "seed": None,
        "name": None,
    },
    "trajectory": TRAJECTORY_DEFAULTS,
    "routes": {},
    "route_combinations": [],
    "window": {"K": 50, "coord_channels": False},
    "model": {
        "hidden": DEFAULT_HIDDEN,
        "layers": 1,
        "decoder_widths": list(DEFAULT_DECODER_WIDTHS),
        "final_activation": False,
    },
    "training": {
        "epochs": 200,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "patience": 20,
        "loss_kind": LossKind.MSE,
        "clip_norm": 10.0,
    },
    "partition": {"mode": "random", "fractions": [0.8, 0.1, 0.1]},
    "ensemble": {"count": 20, "kinds": ["mobile", "immobile"]},
    "sweep": {"widths": [1, 2, 3, 5, 8, 16], "repeats": 3},
    "baselines": {"seeds": 3, "ridge": 1e-8, "lagged_linear": False},
    "population": {"subjects": 12, "holdouts": [0, 1, 2]},
}

# Keys whose values are free-form mappings rather than fixed sections
_OPEN_SECTIONS = ("routes",)


def _merge(defaults: dict, overrides: dict, prefix: str = "") -> dict:
    """Overlay `overrides` on `defaults`, rejecting keys the schema does not know."""
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(dotted, "unknown key")
        if isinstance(defaults[key], dict) and key not in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(dotted, f"expected an object, got {type(value).__name__}")
            merged[key] = _merge(defaults[key], value, f"{dotted}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _number(value, key: str, integer: bool = False, minimum: Optional[float] = None, allow_none: bool = False):
    if value is None and allow_none:
        return None
    kinds = (int,) if integer else (int, float)
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ConfigError(key, f"expected {'an integer' if integer else 'a number'}, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(key, f"must be >= {minimum}, got {value}")
    return value


def _boolean(value, key: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(key, f"expected true or false, got {value!r}")
    return value


def _int_list(value, key: str, minimum: int = 0, allow_empty: bool = True) -> List[int]:
    if not isinstance(value, list) or (not allow_empty and not value):
        raise ConfigError(key, f"expected a {'nonempty ' if not allow_empty else ''}list of integers, got {value!r}")
    return [_number(v, f"{key}[{i}]", integer=True, minimum=minimum) for i, v in enumerate(value)]


def _choice(value, key: str, choices: Sequence[str]) -> str:
    if value not in choices:
        raise ConfigError(key, f"must be one of {list(choices)}, got {value!r}")
    return value


def _validate_trajectory(spec: dict, key: str) -> dict:
    spec = _merge(TRAJECTORY_DEFAULTS, spec, f"{key}.")
    kind = _choice(spec["kind"], f"{key}.kind", TRAJECTORY_KINDS)
    _number(spec["m"], f"{key}.m", integer=True, minimum=1)
    _number(spec["step_interval"], f"{key}.step_interval", integer=True, minimum=1)
    _number(spec["period"], f"{key}.period", integer=True, minimum=1, allow_none=True)
    _number(spec["seed"], f"{key}.seed", integer=True, minimum=0, allow_none=True)
    if kind == "circuit":
        if spec["period"] is None:
            raise ConfigError(f"{key}.period", "required for circuit trajectories")
        if not isinstance(spec["waypoints"], list) or not spec["waypoints"]:
            raise ConfigError(f"{key}.waypoints", "circuit trajectories need at least one waypoint")
    if kind == "fixed":
        _int_list(spec["indices"], f"{key}.indices", allow_empty=False)
    return spec


@dataclass
class ExperimentConfig:
    """Validated experiment settings with builders for the domain objects."""
    data: Dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: Optional[Path] = None

    def __post_init__(self):
        self.data = _merge(DEFAULTS, self.data)
        self.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """
        Load and validate a JSON config file.

        Args:
            path: Config file path

        Returns:
            ExperimentConfig: Validated configuration

        Raises:
            ConfigError: if the file is missing, malformed or invalid
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON in {path}: {str(e)}") from e
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be an object")
        config = cls(data, path)
        logger.debug(f"Configuration loaded from {path}")
        return config

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=4)
        return path

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "ExperimentConfig":
        """Copy with command-line overrides applied."""
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["seed"] = seed
        if output_dir is not None:
            data["output_dir"] = str(output_dir)
        return ExperimentConfig(data, self.source)

    def validate(self):
        """
        Check every section before any compute runs.

        Raises:
            ConfigError: naming the first offending dotted key
        """
        d = self.data
        _number(d["seed"], "seed", integer=True, minimum=0)
        for key in ("output_dir", "dataset_path"):
            if d[key] is not None and not isinstance(d[key], str):
                raise ConfigError(key, f"expected a path string, got {d[key]!r}")

        # Field specs carry their own checks; re-key their errors under "field."
        try:
            spec = self.field_spec()
            spec.validate()
        except ConfigError as e:
            raise ConfigError(e.key if e.key.startswith("field.") else f"field.{e.key}",
                              str(e).split(": ", 1)[-1]) from None
        except (TypeError, ValueError) as e:
            raise ConfigError("field", str(e)) from None

        self.trajectory_spec = _validate_trajectory(d["trajectory"], "trajectory")
        if not isinstance(d["routes"], dict):
            raise ConfigError("routes", "expected an object mapping route names to trajectories")
        self.route_specs = {name: _validate_trajectory(spec, f"routes.{name}") for name, spec in d["routes"].items()}
        if not isinstance(d["route_combinations"], list):
            raise ConfigError("route_combinations", "expected a list of route-name lists")
        for i, combo in enumerate(d["route_combinations"]):
            if not isinstance(combo, list) or not combo:
                raise ConfigError(f"route_combinations[{i}]", "expected a nonempty list of route names")
            for name in combo:
                if name not in self.route_specs:
                    raise ConfigError(f"route_combinations[{i}]", f"unknown route {name!r}")

        window = d["window"]
        K = _number(window["K"], "window.K", integer=True, minimum=1)
        if K > spec.N:
            raise ConfigError("window.K", f"must not exceed field.N={spec.N}, got {K}")
        _boolean(window["coord_channels"], "window.coord_channels")
        model = d["model"]
        _number(model["hidden"], "model.hidden", integer=True, minimum=1)
        _number(model["layers"], "model.layers", integer=True, minimum=1)
        _int_list(model["decoder_widths"], "model.decoder_widths", minimum=1)
        _boolean(model["final_activation"], "model.final_activation")

        training = d["training"]
        for key in ("epochs", "batch_size", "patience"):
            _number(training[key], f"training.{key}", integer=True, minimum=1)
        for key in ("learning_rate", "beta1", "beta2", "eps"):
            _number(training[key], f"training.{key}", minimum=0)
        _number(training["clip_norm"], "training.clip_norm", allow_none=True)
        _choice(training["loss_kind"], "training.loss_kind", LossKind.ALL)

        _choice(d["partition"]["mode"], "partition.mode", [m.value for m in PartitionMode])
        fractions = d["partition"]["fractions"]
        if not isinstance(fractions, list) or len(fractions) != 3:
            raise ConfigError("partition.fractions", f"expected three numbers, got {fractions!r}")
        for i, f in enumerate(fractions):
            _number(f, f"partition.fractions[{i}]")

        _number(d["ensemble"]["count"], "ensemble.count", integer=True, minimum=1)
        kinds = d["ensemble"]["kinds"]
        if not isinstance(kinds, list) or not kinds:
            raise ConfigError("ensemble.kinds", f"expected a nonempty list, got {kinds!r}")
        for i, kind in enumerate(kinds):
            _choice(kind, f"ensemble.kinds[{i}]", ENSEMBLE_KINDS)
        _int_list(d["sweep"]["widths"], "sweep.widths", minimum=1, allow_empty=False)
        _number(d["sweep"]["repeats"], "sweep.repeats", integer=True, minimum=1)
        _number(d["baselines"]["seeds"], "baselines.seeds", integer=True, minimum=1)
        _number(d["baselines"]["ridge"], "baselines.ridge", minimum=0)
        _boolean(d["baselines"]["lagged_linear"], "baselines.lagged_linear")
        subjects = _number(d["population"]["subjects"], "population.subjects", integer=True, minimum=2)
        for i, subject in enumerate(_int_list(d["population"]["holdouts"], "population.holdouts", allow_empty=False)):
            if subject >= subjects:
                raise ConfigError(f"population.holdouts[{i}]", f"subject {subject} outside [0, {subjects})")

        # Dataclass checks (TrainConfig, ReconstructionSetup) run last
        self.setup()

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"]) if self.data["output_dir"] else output_root()

    @property
    def dataset_path(self) -> Optional[Path]:
        return Path(self.data["dataset_path"]) if self.data["dataset_path"] else None

    def section(self, name: str) -> dict:
        return self.data[name]

    def field_spec(self) -> FieldSpec:
        """FieldSpec built from the `field` section; a null seed fans out from the global seed."""
        f = self.data["field"]
        try:
            kind = FieldKind(f["kind"])
            initial = InitialCondition(f["initial_condition"])
        except ValueError as e:
            key = "field.kind" if "FieldKind" in str(e) else "field.initial_condition"
            raise ConfigError(key, str(e)) from None
        if not isinstance(f["grid_shape"], list) or not f["grid_shape"]:
            raise ConfigError("field.grid_shape", f"expected a nonempty list of integers, got {f['grid_shape']!r}")
        _int_list(f["grid_shape"], "field.grid_shape", minimum=1)
        _number(f["N"], "field.N", integer=True, minimum=3)
        _number(f["rank"], "field.rank", integer=True, minimum=1)
        _number(f["noise_std"], "field.noise_std", minimum=0, allow_none=True)
        _number(f["seed"], "field.seed", integer=True, minimum=0, allow_none=True)
        seed = f["seed"] if f["seed"] is not None else stage_seed(self.data["seed"], "field")
        return FieldSpec(
            kind=kind,
            grid_shape=tuple(f["grid_shape"]),
            N=f["N"],
            rank=f["rank"],
            frequencies=f["frequencies"],
            amplitudes=f["amplitudes"],
            partner_amplitudes=f["partner_amplitudes"],
            diffusivity=f["diffusivity"],
            initial_condition=initial,
            initial_value=f["initial_value"],
            stride_period=f["stride_period"],
            jitter=f["jitter"],
            mirror_channels=tuple(tuple(triple) for triple in f["mirror_channels"]),
            dt=f["dt"],
            noise_std=f["noise_std"],
            seed=seed,
            name=f["name"],
        )

    def train_config(self) -> TrainConfig:
        t = self.data["training"]
        return TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            learning_rate=float(t["learning_rate"]),
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            eps=float(t["eps"]),
            patience=t["patience"],
            seed=stage_seed(self.seed, "train"),
            loss_kind=t["loss_kind"],
            clip_norm=None if t["clip_norm"] is None else float(t["clip_norm"]),
        )

    def setup(self) -> ReconstructionSetup:
        """Window, model, partition and training settings with stage seeds of the global seed."""
        model, window, partition = self.data["model"], self.data["window"], self.data["partition"]
        return ReconstructionSetup(
            K=window["K"],
            hidden=model["hidden"],
            layers=model["layers"],
            decoder_widths=tuple(model["decoder_widths"]),
            coord_channels=window["coord_channels"],
            final_activation=model["final_activation"],
            training=self.train_config(),
            partition_mode=PartitionMode(partition["mode"]),
            fractions=tuple(partition["fractions"]),
            partition_seed=stage_seed(self.seed, "partition"),
            init_seed=stage_seed(self.seed, "init"),
        )

    def build_trajectory(self, dataset: FieldDataset, spec: Optional[dict] = None, index: int = 0,
                         stage: str = "trajectory") -> SensorTrajectory:
        """
        Trajectory described by `spec` (the `trajectory` section by default) on the dataset's lattice.

        Random kinds with a null seed draw `stage_seed(seed, stage, index)`.
        """
        spec = self.trajectory_spec if spec is None else spec
        seed = spec["seed"] if spec["seed"] is not None else stage_seed(self.seed, stage, index)
        kind = spec["kind"]
        try:
            if kind == "immobile":
                return immobile_trajectory(dataset.n, spec["m"], seed, dataset.grid_shape)
            if kind == "random_walk":
                return random_walk_trajectory(dataset.grid_shape, dataset.N, spec["step_interval"], seed, spec["m"])
            if kind == "circuit":
                return circuit_trajectory(dataset.grid_shape, dataset.N, spec["waypoints"], spec["period"])
            return fixed_trajectory(dataset.grid_shape, spec["indices"])
        except ShredError as e:
            raise ConfigError(stage, str(e)) from None

    def routes(self, dataset: FieldDataset) -> Dict[str, SensorTrajectory]:
        routes = {}
        for index, (name, spec) in enumerate(self.route_specs.items()):
            trajectory = self.build_trajectory(dataset, spec, index, stage="routes")
            routes[name] = SensorTrajectory(trajectory.positions, trajectory.grid_shape, trajectory.period, name)
        return routes

    def route_combinations(self) -> List[List[str]]:
        combos = self.data["route_combinations"]
        return [list(c) for c in combos] if combos else [[name] for name in self.route_specs]

    def ensemble_factory(self, dataset: FieldDataset, kind: str) -> Callable[[int], SensorTrajectory]:
        """Member index -> fresh trajectory: random walks for mobile, random placements for immobile."""
        m = self.trajectory_spec["m"]
        step_interval = self.trajectory_spec["step_interval"]
        stage = f"ensemble-{kind}"

        def factory(index: int) -> SensorTrajectory:
            seed = stage_seed(self.seed, stage, index)
            if kind == "mobile":
                return random_walk_trajectory(dataset.grid_shape, dataset.N, step_interval, seed, m)
            return immobile_trajectory(dataset.n, m, seed, dataset.grid_shape)
        return factory
