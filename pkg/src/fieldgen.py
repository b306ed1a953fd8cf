"""
Synthetic spatio-temporal fields: low-rank, diffusion, decoupled and gait-like.
"""

from dataclasses import dataclass, replace
from enum import Enum
from itertools import product
from typing import List, Optional, Sequence, Tuple

import numpy as np

from utils.error_handler import InvalidSpecError
from utils.logger import logger


# Periods, in snapshots, of the slowest mode of each half of a field
BASE_PERIOD = 100.0
PARTNER_BASE_PERIOD = 40.0

GAIT_CHANNELS = 18
GAIT_HARMONICS = 3
RELATIVE_NOISE = 0.01


class FieldKind(Enum):
    """Generator families."""
    LOWRANK = "lowrank"
    DIFFUSION = "diffusion"
    DECOUPLED = "decoupled"
    GAIT = "gait"


class InitialCondition(Enum):
    """Initial states for the diffusion generator."""
    SMOOTH = "smooth"
    CONSTANT = "constant"
    HOT_NODE = "hot_node"


@dataclass(frozen=True)
class FieldDataset:
    """Snapshot matrix (n nodes x N times) with its grid metadata."""
    snapshots: np.ndarray
    grid_shape: Tuple[int, ...]
    dt: float = 1.0
    name: str = "field"

    def __post_init__(self):
        snapshots = np.array(self.snapshots, dtype=np.float64)
        grid_shape = tuple(int(s) for s in self.grid_shape)
        if snapshots.ndim != 2:
            raise InvalidSpecError("snapshots", f"expected a 2-D matrix, got {snapshots.ndim} dimensions")
        if int(np.prod(grid_shape)) != snapshots.shape[0]:
            raise InvalidSpecError(
                "grid_shape", f"product of {list(grid_shape)} does not match {snapshots.shape[0]} nodes")
        if snapshots.shape[1] < 3:
            raise InvalidSpecError("N", f"at least 3 snapshots required, got {snapshots.shape[1]}")
        if not np.all(np.isfinite(snapshots)):
            raise InvalidSpecError("snapshots", "contains NaN or Inf")
        snapshots.setflags(write=False)
        object.__setattr__(self, "snapshots", snapshots)
        object.__setattr__(self, "grid_shape", grid_shape)

    @property
    def n(self) -> int:
        return self.snapshots.shape[0]

    @property
    def N(self) -> int:
        return self.snapshots.shape[1]

    def node_coordinates(self, nodes: Sequence[int]) -> np.ndarray:
        """Lattice coordinates (len(nodes) x axes) of flat node indices."""
        return np.stack(np.unravel_index(np.asarray(nodes, dtype=np.int64), self.grid_shape), axis=-1)


@dataclass(frozen=True)
class FieldSpec:
    """
    Parameters of one synthetic field.

    `frequencies` are in cycles per unit time with t_k = k * dt. `noise_std=None`
    means 1% of the noiseless signal standard deviation.
    """
    kind: FieldKind = FieldKind.LOWRANK
    grid_shape: Tuple[int, ...] = (20, 20)
    N: int = 1200
    rank: int = 5
    frequencies: Optional[Tuple[float, ...]] = None
    amplitudes: Optional[Tuple[float, ...]] = None
    partner_amplitudes: Optional[Tuple[float, ...]] = None
    diffusivity: float = 0.05
    initial_condition: InitialCondition = InitialCondition.SMOOTH
    initial_value: float = 1.0
    stride_period: float = 50.0
    jitter: float = 0.0
    mirror_channels: Tuple[Tuple[int, int, float], ...] = ()
    dt: float = 1.0
    noise_std: Optional[float] = None
    seed: int = 0
    name: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FieldKind(self.kind))
        object.__setattr__(self, "initial_condition", InitialCondition(self.initial_condition))
        object.__setattr__(self, "grid_shape", tuple(int(s) for s in self.grid_shape))
        for key in ("frequencies", "amplitudes", "partner_amplitudes"):
            value = getattr(self, key)
            if value is not None:
                object.__setattr__(self, key, tuple(float(v) for v in value))
        object.__setattr__(self, "mirror_channels",
                           tuple((int(c), int(s), float(f)) for c, s, f in self.mirror_channels))

    @property
    def n(self) -> int:
        return int(np.prod(self.grid_shape))

    def validate(self):
        """
        Check the generic constraints shared by all generators.

        Raises:
            InvalidSpecError: naming the offending field
        """
        if not self.grid_shape or any(s < 1 for s in self.grid_shape):
            raise InvalidSpecError("grid_shape", f"every axis needs at least one node, got {list(self.grid_shape)}")
        if self.N < 3:
            raise InvalidSpecError("N", f"at least 3 snapshots required, got {self.N}")
        if self.noise_std is not None and self.noise_std < 0:
            raise InvalidSpecError("noise_std", f"must be >= 0, got {self.noise_std}")
        if self.dt <= 0:
            raise InvalidSpecError("dt", f"must be > 0, got {self.dt}")
        if self.frequencies is not None and any(f <= 0 for f in self.frequencies):
            raise InvalidSpecError("frequencies", "all frequencies must be > 0")
        if self.kind in (FieldKind.LOWRANK, FieldKind.DECOUPLED) and self.rank < 1:
            raise InvalidSpecError("rank", f"must be >= 1, got {self.rank}")
        nodes = self.n // 2 if self.kind is FieldKind.DECOUPLED else self.n
        if self.kind in (FieldKind.LOWRANK, FieldKind.DECOUPLED) and self.rank > nodes:
            raise InvalidSpecError("rank", f"rank {self.rank} exceeds node count {nodes}")


def generate(spec: FieldSpec) -> FieldDataset:
    """
    Dispatch to the generator for `spec.kind`.

    Args:
        spec: FieldSpec to generate

    Returns:
        FieldDataset: Generated field
    """
    generators = {
        FieldKind.LOWRANK: generate_lowrank,
        FieldKind.DIFFUSION: generate_diffusion,
        FieldKind.DECOUPLED: generate_decoupled,
        FieldKind.GAIT: generate_gait,
    }
    dataset = generators[spec.kind](spec)
    logger.debug(f"Generated {dataset.name}: n={dataset.n}, N={dataset.N}")
    return dataset


def _check_kind(spec: FieldSpec, kind: FieldKind):
    if spec.kind is not kind:
        raise InvalidSpecError("kind", f"expected {kind.value}, got {spec.kind.value}")
    spec.validate()


def _add_noise(clean: np.ndarray, noise_std: Optional[float], rng: np.random.Generator) -> np.ndarray:
    level = RELATIVE_NOISE * float(np.std(clean)) if noise_std is None else noise_std
    if level == 0:
        return clean
    return clean + rng.normal(0.0, level, size=clean.shape)


def spatial_modes(grid_shape: Sequence[int], count: int) -> np.ndarray:
    """
    Orthonormal spatial modes (n x count): tensor products of cosines.

    Mode wavenumber tuples are taken in order of increasing total wavenumber;
    the constant tuple comes last so it is only used when count == n.

    Args:
        grid_shape: Lattice shape
        count: Number of modes, at most the node count

    Returns:
        np.ndarray: Column-orthonormal mode matrix in C (row-major) node order
    """
    n = int(np.prod(grid_shape))
    if count > n:
        raise InvalidSpecError("rank", f"rank {count} exceeds node count {n}")
    wavenumbers = sorted(product(*(range(s) for s in grid_shape)),
                         key=lambda k: (sum(k) == 0, sum(k), k))[:count]
    axes = [(np.arange(s) + 0.5) / s for s in grid_shape]
    modes = np.empty((n, count))
    for j, ks in enumerate(wavenumbers):
        factors = [np.cos(np.pi * k * x) for k, x in zip(ks, axes)]
        mode = factors[0]
        for factor in factors[1:]:
            mode = np.multiply.outer(mode, factor)
        mode = np.ravel(mode)
        modes[:, j] = mode / np.linalg.norm(mode)
    return modes


def primes(count: int, offset: int = 0) -> np.ndarray:
    """Primes number `offset` through `offset + count - 1` (0-based: primes(1) == [2])."""
    total = offset + count
    # Rosser's bound p_k < k (ln k + ln ln k) holds for k >= 6
    limit = max(15, int(total * (np.log(total) + np.log(np.log(total)))) + 1) if total > 1 else 15
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for p in range(2, int(limit ** 0.5) + 1):
        if sieve[p]:
            sieve[p * p::p] = False
    return np.flatnonzero(sieve)[offset:total]


def default_frequencies(count: int, offset: int = 0, base_period: float = BASE_PERIOD) -> Tuple[float, ...]:
    """Frequencies sqrt(p) / base_period over consecutive primes starting at prime number `offset`."""
    return tuple(float(np.sqrt(p)) / base_period for p in primes(count, offset))


def _lowrank_block(grid_shape: Sequence[int], N: int, dt: float, rank: int,
                   frequencies: Sequence[float], amplitudes: Sequence[float],
                   rng: np.random.Generator) -> np.ndarray:
    if len(frequencies) != rank:
        raise InvalidSpecError("frequencies", f"expected {rank} values, got {len(frequencies)}")
    if len(amplitudes) != rank:
        raise InvalidSpecError("amplitudes", f"expected {rank} values, got {len(amplitudes)}")
    modes = spatial_modes(grid_shape, rank)
    t = np.arange(N) * dt
    phases = rng.uniform(0.0, 2.0 * np.pi, size=rank)
    temporal = np.sin(2.0 * np.pi * np.outer(t, frequencies) + phases)
    return (modes * np.asarray(amplitudes)) @ temporal.T


def generate_lowrank(spec: FieldSpec) -> FieldDataset:
    """
    Sum of `rank` separable modes with incommensurate temporal frequencies.

    Default amplitudes decay as 1/k so the singular spectrum has a clear elbow
    at the rank.

    Args:
        spec: FieldSpec with kind lowrank

    Returns:
        FieldDataset: snapshots = sum_k a_k mode_k temporal_k^T (+ noise)
    """
    _check_kind(spec, FieldKind.LOWRANK)
    rng = np.random.default_rng(spec.seed)
    frequencies = spec.frequencies or default_frequencies(spec.rank)
    amplitudes = spec.amplitudes or tuple(1.0 / k for k in range(1, spec.rank + 1))
    clean = _lowrank_block(spec.grid_shape, spec.N, spec.dt, spec.rank, frequencies, amplitudes, rng)
    snapshots = _add_noise(clean, spec.noise_std, rng)
    return FieldDataset(snapshots, spec.grid_shape, spec.dt, spec.name or f"lowrank-r{spec.rank}")


def _laplacian(u: np.ndarray) -> np.ndarray:
    total = np.zeros_like(u)
    for axis in range(u.ndim):
        total += np.roll(u, 1, axis=axis) + np.roll(u, -1, axis=axis) - 2.0 * u
    return total


def _initial_state(spec: FieldSpec, rng: np.random.Generator) -> np.ndarray:
    shape = spec.grid_shape
    if spec.initial_condition is InitialCondition.CONSTANT:
        return np.full(shape, spec.initial_value)
    if spec.initial_condition is InitialCondition.HOT_NODE:
        u = np.zeros(shape)
        u[tuple(s // 2 for s in shape)] = spec.initial_value
        return u
    # Smooth random field: a few low-wavenumber periodic cosines
    coords = np.meshgrid(*(np.arange(s) / s for s in shape), indexing="ij")
    u = np.zeros(shape)
    for _ in range(6):
        ks = [int(rng.integers(0, 4)) for _ in shape]
        phase = rng.uniform(0.0, 2.0 * np.pi)
        u += rng.normal() * np.cos(2.0 * np.pi * sum(k * x for k, x in zip(ks, coords)) + phase)
    return spec.initial_value * u


def generate_diffusion(spec: FieldSpec) -> FieldDataset:
    """
    Explicit finite-difference heat equation on a periodic unit-spacing lattice.

    Each snapshot is one forward Euler step of the previous one, so the
    spatial mean is conserved and the maximum never grows.

    Args:
        spec: FieldSpec with kind diffusion

    Returns:
        FieldDataset: Diffusion snapshots

    Raises:
        InvalidSpecError: if dt * diffusivity * axes > 1/4
    """
    _check_kind(spec, FieldKind.DIFFUSION)
    if spec.diffusivity < 0:
        raise InvalidSpecError("diffusivity", f"must be >= 0, got {spec.diffusivity}")
    courant = spec.dt * spec.diffusivity * len(spec.grid_shape)
    if courant > 0.25:
        raise InvalidSpecError(
            "diffusivity", f"explicit scheme unstable: dt*diffusivity*sum(1/h^2) = {courant:.4g} > 1/4")
    rng = np.random.default_rng(spec.seed)
    u = _initial_state(spec, rng)
    clean = np.empty((spec.n, spec.N))
    for k in range(spec.N):
        clean[:, k] = u.ravel()
        u = u + spec.dt * spec.diffusivity * _laplacian(u)
    snapshots = _add_noise(clean, spec.noise_std, rng)
    return FieldDataset(snapshots, spec.grid_shape, spec.dt, spec.name or "diffusion")


def generate_decoupled(spec: FieldSpec) -> FieldDataset:
    """
    Two statistically independent low-rank fields side by side.

    The first grid axis is split in half. The right half uses later primes and
    a faster base period, so no frequency is shared between halves.

    Args:
        spec: FieldSpec with kind decoupled

    Returns:
        FieldDataset: Left and right halves stacked along the first axis
    """
    _check_kind(spec, FieldKind.DECOUPLED)
    if spec.grid_shape[0] % 2:
        raise InvalidSpecError("grid_shape", f"first axis must be even to split in halves, got {spec.grid_shape[0]}")
    half = (spec.grid_shape[0] // 2,) + spec.grid_shape[1:]
    left_rng = np.random.default_rng(spec.seed)
    right_rng = np.random.default_rng(spec.seed + 1)
    default_amplitudes = tuple(1.0 / k for k in range(1, spec.rank + 1))
    left = _lowrank_block(half, spec.N, spec.dt, spec.rank,
                          spec.frequencies or default_frequencies(spec.rank),
                          spec.amplitudes or default_amplitudes, left_rng)
    right = _lowrank_block(half, spec.N, spec.dt, spec.rank,
                           default_frequencies(spec.rank, offset=spec.rank, base_period=PARTNER_BASE_PERIOD),
                           spec.partner_amplitudes or default_amplitudes, right_rng)
    left = _add_noise(left, spec.noise_std, left_rng)
    right = _add_noise(right, spec.noise_std, right_rng)
    # First axis is the slowest-varying index in C order
    snapshots = np.concatenate([left, right], axis=0)
    return FieldDataset(snapshots, spec.grid_shape, spec.dt, spec.name or f"decoupled-r{spec.rank}")


def half_masks(grid_shape: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Boolean node masks of the left and right halves along the first axis."""
    first = np.unravel_index(np.arange(int(np.prod(grid_shape))), tuple(grid_shape))[0]
    left = first < grid_shape[0] // 2
    return left, ~left


def _gait_waveforms(channels: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    harmonics = np.arange(1, GAIT_HARMONICS + 1)
    coefficients = rng.uniform(0.2, 1.0, size=(channels, GAIT_HARMONICS)) / harmonics
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(channels, GAIT_HARMONICS))
    return coefficients, phases


def _gait_signal(phase: np.ndarray, coefficients: np.ndarray, phases: np.ndarray,
                 gains: np.ndarray, mirrors: Sequence[Tuple[int, int, float]]) -> np.ndarray:
    harmonics = np.arange(1, GAIT_HARMONICS + 1)
    # (channels, harmonics, N)
    angles = harmonics[None, :, None] * phase[None, None, :] + phases[:, :, None]
    signal = np.sum(coefficients[:, :, None] * np.cos(angles), axis=1) * gains[:, None]
    for channel, source, factor in mirrors:
        signal[channel] = factor * signal[source]
    return signal


def generate_gait(spec: FieldSpec, stride_scale: float = 1.0, gain_scale: Optional[np.ndarray] = None,
                  subject_seed: Optional[int] = None) -> FieldDataset:
    """
    Eighteen-channel quasi-periodic signal driven by one shared stride phase.

    Args:
        spec: FieldSpec with kind gait; grid_shape gives the channel count
        stride_scale: Multiplier on the stride period (per-subject variation)
        gain_scale: Per-channel amplitude multipliers (per-subject variation)
        subject_seed: Seed for the jitter and noise streams; waveform shapes
            always come from `spec.seed`

    Returns:
        FieldDataset: channels x N snapshot matrix
    """
    _check_kind(spec, FieldKind.GAIT)
    if len(spec.grid_shape) != 1:
        raise InvalidSpecError("grid_shape", f"gait fields are one-dimensional, got {list(spec.grid_shape)}")
    if spec.stride_period <= 0:
        raise InvalidSpecError("stride_period", f"must be > 0, got {spec.stride_period}")
    if spec.jitter < 0:
        raise InvalidSpecError("jitter", f"must be >= 0, got {spec.jitter}")
    channels = spec.grid_shape[0]
    for channel, source, _ in spec.mirror_channels:
        if not (0 <= channel < channels and 0 <= source < channels) or channel == source:
            raise InvalidSpecError("mirror_channels", f"invalid pair ({channel}, {source}) for {channels} channels")
    gains = np.ones(channels) if spec.amplitudes is None else np.asarray(spec.amplitudes)
    if gains.shape != (channels,):
        raise InvalidSpecError("amplitudes", f"expected {channels} channel gains, got {gains.size}")
    if gain_scale is not None:
        gains = gains * gain_scale

    coefficients, phases = _gait_waveforms(channels, np.random.default_rng(spec.seed))
    rng = np.random.default_rng(spec.seed if subject_seed is None else subject_seed)
    period = spec.stride_period * stride_scale
    steps = np.arange(spec.N)
    phase = 2.0 * np.pi * steps / period
    if spec.jitter > 0:
        phase = phase + spec.jitter * np.concatenate([[0.0], np.cumsum(rng.normal(size=spec.N - 1))])
    clean = _gait_signal(phase, coefficients, phases, gains, spec.mirror_channels)
    snapshots = _add_noise(clean, spec.noise_std, rng)
    return FieldDataset(snapshots, spec.grid_shape, spec.dt, spec.name or "gait")


def generate_gait_cohort(spec: FieldSpec, subjects: int = 12) -> List[FieldDataset]:
    """
    A cohort of gait fields sharing waveform shapes but not stride or gains.

    Each subject's stride period varies within +-8% and channel gains within
    +-10%, drawn from a stream seeded by `spec.seed`.

    Args:
        spec: FieldSpec with kind gait
        subjects: Number of subjects

    Returns:
        List[FieldDataset]: One dataset per subject
    """
    if subjects < 2:
        raise InvalidSpecError("population.subjects", f"need at least 2 subjects, got {subjects}")
    rng = np.random.default_rng(spec.seed + 7919)
    channels = spec.grid_shape[0]
    cohort = []
    for subject in range(subjects):
        stride_scale = float(rng.uniform(0.92, 1.08))
        gain_scale = rng.uniform(0.9, 1.1, size=channels)
        cohort.append(generate_gait(
            replace(spec, name=f"gait-subject{subject:02d}"),
            stride_scale=stride_scale,
            gain_scale=gain_scale,
            subject_seed=spec.seed + 1000 * (subject + 1),
        ))
    logger.info(f"Generated gait cohort of {subjects} subjects")
    return cohort
