"""Euler-Maruyama integration of the energy SDE on an interaction graph.

One Gaussian increment is drawn per undirected edge ``(lo, hi)``; the
oriented increment for ``(hi, lo)`` is its negative. The per-edge energy
flux is added to ``lo`` and subtracted from ``hi``, so every step conserves
the total energy up to floating point round-off.

A step that would make some energy nonpositive is rejected for the affected
trajectories only. The increment is split at the midpoint with a Brownian
bridge and both halves are retried; this repeats up to ``max_halvings``
times before :class:`~app.errors.PositivityError` is raised.

Ensembles are integrated as batches of trajectories sharing one array
state. Batch ``k`` draws from the stream ``make_rng(seed, purpose, k)``, so
results do not depend on which worker ran which batch.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from app.errors import PositivityError
from app.lab import coeffs
from app.lab.coeffs import CoefficientModel
from app.lab.micro.cutoffs import CutoffFamily
from app.lab.records import EnsembleRecord, TrajectoryRecord
from app.lab.rng import make_rng
from app.lab.topology import InteractionGraph

logger = logging.getLogger(__name__)

SDE_STREAM = "sde"
ENSEMBLE_STREAM = "sde-ensemble"
LOG_STEP = 1e-4
REJECTION_WARNING = 1000
SQRT2 = math.sqrt(2.0)


@dataclass
class EnergyState:
    energies: np.ndarray
    time: float = 0.0

    def __post_init__(self) -> None:
        self.energies = np.asarray(self.energies, dtype=float)

    @property
    def total(self) -> float:
        return float(self.energies.sum())

    def is_valid(self) -> bool:
        return bool(np.all(self.energies > 0)) and self.time >= 0


@dataclass(frozen=True)
class StepRejected:
    """Returned by :func:`em_step` when some updated energy is not positive."""

    time: float
    dt: float
    vertices: tuple[int, ...]


def default_dt(model: CoefficientModel, energies: Sequence[float]) -> float:
    return 1e-4 * float(np.mean(energies)) ** 1.5 / model.A


@dataclass(frozen=True)
class SdeRunConfig:
    graph: InteractionGraph
    model: CoefficientModel
    initial_energies: tuple[float, ...]
    t_end: float
    dt: float | None = None
    delta_stop: float = 0.0
    seed: int = 0
    max_halvings: int = 40
    record_stride: int = 1
    stop_cluster: int = 1
    config_digest: str = ""

    def __post_init__(self) -> None:
        energies = tuple(float(e) for e in self.initial_energies)
        object.__setattr__(self, "initial_energies", energies)
        if len(energies) != self.graph.n_vertices:
            raise ValueError(f"{len(energies)} initial energies for {self.graph.n_vertices} vertices")
        if not all(e > 0 for e in energies):
            raise ValueError("initial energies must satisfy E_x > 0")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.dt is not None and not 0 < self.dt < self.t_end:
            raise ValueError("dt must satisfy 0 < dt < t_end")
        if self.delta_stop < 0:
            raise ValueError("delta_stop must be nonnegative")
        if self.max_halvings < 0 or self.record_stride < 1:
            raise ValueError("max_halvings must be >= 0 and record_stride >= 1")
        if not 1 <= self.stop_cluster <= max(1, self.graph.n_vertices):
            raise ValueError("stop_cluster must be between 1 and the number of vertices")

    @property
    def step(self) -> float:
        if self.dt is not None:
            return float(self.dt)
        return min(default_dt(self.model, self.initial_energies), self.t_end / 2.0)

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_end / self.step - 1e-9))

    def time_at(self, k: int) -> float:
        return min(k * self.step, self.t_end)


def sample_edge_noise(graph: InteractionGraph, dt: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """N(0, dt) increments, one per undirected edge, oriented lo -> hi."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    shape = (graph.n_edges,) if size is None else (size, graph.n_edges)
    return rng.normal(0.0, math.sqrt(dt), size=shape)


def oriented_noise(graph: InteractionGraph, noise: np.ndarray) -> np.ndarray:
    """Dense antisymmetric matrix of oriented increments ``dB[x, y]``."""
    out = np.zeros((graph.n_vertices, graph.n_vertices))
    out[graph.heads, graph.tails] = noise
    out[graph.tails, graph.heads] = -noise
    return out


def cluster_energy(energies: np.ndarray, n: int) -> np.ndarray:
    """Sum of the ``n`` smallest energies along the last axis."""
    if n == 1:
        return energies.min(axis=-1)
    return np.sort(energies, axis=-1)[..., :n].sum(axis=-1)


def edge_flux(graph: InteractionGraph, model: CoefficientModel, energies: np.ndarray, dt: float, noise: np.ndarray) -> np.ndarray:
    lo = energies[..., graph.heads]
    hi = energies[..., graph.tails]
    a = np.asarray(coeffs.drift(model, lo, hi))
    b2 = np.asarray(coeffs.beta_sq(model, lo, hi))
    return a * dt + np.sqrt(2.0 * b2) * noise


def energy_increment(graph: InteractionGraph, model: CoefficientModel, energies: np.ndarray, dt: float, noise: np.ndarray) -> np.ndarray:
    if graph.n_edges == 0:
        return np.zeros_like(energies)
    return graph.edge_divergence(edge_flux(graph, model, energies, dt, noise))


def em_step(state: EnergyState, graph: InteractionGraph, model: CoefficientModel, dt: float, noise: np.ndarray) -> EnergyState | StepRejected:
    updated = state.energies + energy_increment(graph, model, state.energies, dt, noise)
    bad = np.nonzero(~(updated > 0))[0]
    if bad.size:
        return StepRejected(time=state.time, dt=dt, vertices=tuple(int(v) for v in bad))
    return EnergyState(updated, state.time + dt)


@dataclass
class StepStats:
    rejections: int = 0
    max_depth: int = 0
    max_step_imbalance: float = 0.0

    def as_dict(self) -> dict[str, Any]:
        return {
            "rejections": self.rejections,
            "maxHalvings": self.max_depth,
            "maxStepImbalance": self.max_step_imbalance,
        }


@dataclass
class BatchResult:
    """Outcome of integrating a batch of trajectories side by side."""

    final: np.ndarray
    stopped: np.ndarray
    stop_times: np.ndarray
    running_min: np.ndarray
    sample_times: np.ndarray
    samples: np.ndarray | None
    stop_states: np.ndarray
    stats: StepStats = field(default_factory=StepStats)

    def member_record(self, i: int, seed: int, digest: str, metadata: dict[str, Any]) -> TrajectoryRecord:
        if self.samples is None:
            raise ValueError("batch was integrated without recording samples")
        if self.stopped[i]:
            keep = self.sample_times < self.stop_times[i]
            times = np.concatenate([self.sample_times[keep], [self.stop_times[i]]])
            energies = np.concatenate([self.samples[keep, i], self.stop_states[i][None, :]])
        else:
            times = self.sample_times
            energies = self.samples[:, i]
        return TrajectoryRecord(
            times=times,
            energies=energies,
            stopped=bool(self.stopped[i]),
            stop_time=float(self.stop_times[i]) if self.stopped[i] else None,
            seed=seed,
            config_digest=digest,
            metadata=metadata,
        )


class _BatchIntegrator:
    def __init__(self, config: SdeRunConfig, rng: np.random.Generator):
        self.config = config
        self.graph = config.graph
        self.model = config.model
        self.rng = rng
        self.stats = StepStats()

    def _advance(self, energies: np.ndarray, dt: float, noise: np.ndarray, depth: int, t: float) -> np.ndarray:
        increment = energy_increment(self.graph, self.model, energies, dt, noise)
        updated = energies + increment
        bad = ~np.all(updated > 0, axis=1)
        good = ~bad
        if good.any():
            imbalance = np.abs(increment[good].sum(axis=1)) / energies[good].sum(axis=1)
            self.stats.max_step_imbalance = max(self.stats.max_step_imbalance, float(imbalance.max()))
        if not bad.any():
            return updated
        if depth >= self.config.max_halvings:
            row = int(np.nonzero(bad)[0][0])
            raise PositivityError(
                "energy step rejected after the maximum number of halvings",
                state=energies[row],
                time=t,
                dt=dt,
                halvings=depth,
            )
        self.stats.rejections += int(bad.sum())
        self.stats.max_depth = max(self.stats.max_depth, depth + 1)
        whole = noise[bad]
        first = 0.5 * whole + math.sqrt(dt / 4.0) * self.rng.standard_normal(whole.shape)
        middle = self._advance(energies[bad], dt / 2.0, first, depth + 1, t)
        updated[bad] = self._advance(middle, dt / 2.0, whole - first, depth + 1, t + dt / 2.0)
        return updated

    def run(self, initial: np.ndarray, record: bool = True, observer: Callable[[float, np.ndarray], None] | None = None) -> BatchResult:
        cfg = self.config
        energies = np.array(initial, dtype=float, copy=True)
        batch = energies.shape[0]
        cluster = cluster_energy(energies, cfg.stop_cluster)
        running_min = cluster.copy()
        stopped = cluster <= cfg.delta_stop if cfg.delta_stop > 0 else np.zeros(batch, dtype=bool)
        stop_times = np.where(stopped, 0.0, np.nan)
        stop_states = energies.copy()
        sample_times = [0.0]
        samples = [energies.copy()] if record else None
        if observer is not None:
            observer(0.0, energies)

        previous = 0.0
        for k in range(1, cfg.n_steps + 1):
            t = cfg.time_at(k)
            dt = t - previous
            noise = sample_edge_noise(self.graph, dt, self.rng, size=batch)
            active = np.nonzero(~stopped)[0]
            if active.size == 0:
                break
            if self.graph.n_edges:
                energies[active] = self._advance(energies[active], dt, noise[active], 0, previous)
            cluster = cluster_energy(energies[active], cfg.stop_cluster)
            running_min[active] = np.minimum(running_min[active], cluster)
            if cfg.delta_stop > 0:
                hit = active[cluster <= cfg.delta_stop]
                stopped[hit] = True
                stop_times[hit] = t
                stop_states[hit] = energies[hit]
            if k % cfg.record_stride == 0 or k == cfg.n_steps:
                sample_times.append(t)
                if samples is not None:
                    samples.append(energies.copy())
                if observer is not None:
                    observer(t, energies)
            previous = t

        if self.stats.rejections > REJECTION_WARNING:
            logger.warning("%d substeps rejected for positivity (max depth %d)", self.stats.rejections, self.stats.max_depth)
        return BatchResult(
            final=energies,
            stopped=stopped,
            stop_times=stop_times,
            running_min=running_min,
            sample_times=np.asarray(sample_times),
            samples=np.stack(samples, axis=0) if samples is not None else None,
            stop_states=stop_states,
            stats=self.stats,
        )


def run_batch(
    config: SdeRunConfig,
    initial: np.ndarray,
    rng: np.random.Generator,
    *,
    record: bool = True,
    observer: Callable[[float, np.ndarray], None] | None = None,
) -> BatchResult:
    """Integrate ``initial`` (shape ``(batch, n_vertices)``) with one shared stream."""
    initial = np.atleast_2d(np.asarray(initial, dtype=float))
    return _BatchIntegrator(config, rng).run(initial, record=record, observer=observer)


def simulate(config: SdeRunConfig) -> TrajectoryRecord:
    rng = make_rng(config.seed, SDE_STREAM, 0)
    result = run_batch(config, np.asarray(config.initial_energies)[None, :], rng)
    metadata = {"dt": config.step, "tEnd": config.t_end, "deltaStop": config.delta_stop, **result.stats.as_dict()}
    logger.info("SDE run finished: stopped=%s rejections=%d", bool(result.stopped[0]), result.stats.rejections)
    return result.member_record(0, config.seed, config.config_digest, metadata)


def _batches(n_members: int, batch_size: int) -> list[tuple[int, int]]:
    return [(start, min(start + batch_size, n_members)) for start in range(0, n_members, batch_size)]


def integrate_ensemble(
    config: SdeRunConfig,
    initial: np.ndarray,
    *,
    batch_size: int = 1000,
    workers: int = 1,
    record: bool = False,
    purpose: str = ENSEMBLE_STREAM,
) -> list[BatchResult]:
    """Integrate every row of ``initial``; batch ``k`` uses stream ``(seed, purpose, k)``."""
    initial = np.atleast_2d(np.asarray(initial, dtype=float))
    spans = _batches(initial.shape[0], max(1, batch_size))

    def work(index: int) -> BatchResult:
        start, stop = spans[index]
        return run_batch(config, initial[start:stop], make_rng(config.seed, purpose, index), record=record)

    if workers <= 1 or len(spans) == 1:
        return [work(i) for i in range(len(spans))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, range(len(spans))))


def simulate_ensemble(
    config: SdeRunConfig,
    n_members: int,
    *,
    batch_size: int = 1000,
    workers: int = 1,
    record: bool = True,
) -> EnsembleRecord:
    initial = np.tile(np.asarray(config.initial_energies), (n_members, 1))
    results = integrate_ensemble(config, initial, batch_size=batch_size, workers=workers, record=record)
    members: list[TrajectoryRecord] = []
    total = StepStats()
    for result in results:
        if result.samples is None:
            result.samples = np.stack([initial[: result.final.shape[0]], result.final])
            result.sample_times = np.asarray([0.0, result.sample_times[-1]])
        for i in range(result.final.shape[0]):
            members.append(result.member_record(i, config.seed, config.config_digest, {}))
        total.rejections += result.stats.rejections
        total.max_depth = max(total.max_depth, result.stats.max_depth)
        total.max_step_imbalance = max(total.max_step_imbalance, result.stats.max_step_imbalance)
    metadata = {"dt": config.step, "tEnd": config.t_end, "batchSize": batch_size, **total.as_dict()}
    return EnsembleRecord(members=members, seed=config.seed, config_digest=config.config_digest, metadata=metadata)


# -- log coordinates ---------------------------------------------------------


class LogCoordinateField:
    """Drift and edge diffusion of the cutoff SDE for ``z = ln E``.

    ``beta[x, y] = sqrt(2) e**(-z_x/2) phi(e**z_x) phi(e**z_y) sqrt(rho(omega_x, omega_y))``
    and the drift is the divergence form

    ``a_x = sum_y d_{z_x} P(z_x, z_y) - d_{z_y} Q(z_x, z_y) + d/2 sum_y (P - Q)``

    with ``P = e**-z_x phi_x**2 phi_y**2 rho_xy`` and ``Q = e**-z_y phi_x phi_y**3 rho_xy``.
    The partial derivatives are central differences with step ``1e-4``.
    """

    def __init__(self, graph: InteractionGraph, model: CoefficientModel, cutoff: CutoffFamily):
        self.graph = graph
        self.model = model
        self.cutoff = cutoff

    def _rho(self, zx, zy):
        return np.asarray(coeffs.rho(self.model, self.cutoff.omega(zx), self.cutoff.omega(zy)))

    def _p(self, zx, zy):
        fx, fy = self.cutoff.phi_of_log(zx), self.cutoff.phi_of_log(zy)
        return np.exp(-zx) * fx**2 * fy**2 * self._rho(zx, zy)

    def _q(self, zx, zy):
        fx, fy = self.cutoff.phi_of_log(zx), self.cutoff.phi_of_log(zy)
        return np.exp(-zy) * fx * fy**3 * self._rho(zx, zy)

    def oriented_drift(self, zx: np.ndarray, zy: np.ndarray) -> np.ndarray:
        h = LOG_STEP
        d_p = (self._p(zx + h, zy) - self._p(zx - h, zy)) / (2 * h)
        d_q = (self._q(zx, zy + h) - self._q(zx, zy - h)) / (2 * h)
        return d_p - d_q + 0.5 * self.model.d * (self._p(zx, zy) - self._q(zx, zy))

    def oriented_beta(self, zx: np.ndarray, zy: np.ndarray) -> np.ndarray:
        fx, fy = self.cutoff.phi_of_log(zx), self.cutoff.phi_of_log(zy)
        return SQRT2 * np.exp(-0.5 * zx) * fx * fy * np.sqrt(self._rho(zx, zy))

    def drift(self, z: np.ndarray) -> np.ndarray:
        g = self.graph
        out = np.zeros_like(z)
        if g.n_edges == 0:
            return out
        zl, zh = z[g.heads], z[g.tails]
        out += np.bincount(g.heads, self.oriented_drift(zl, zh), minlength=g.n_vertices)
        out += np.bincount(g.tails, self.oriented_drift(zh, zl), minlength=g.n_vertices)
        return out

    def noise_term(self, z: np.ndarray, noise: np.ndarray) -> np.ndarray:
        g = self.graph
        if g.n_edges == 0:
            return np.zeros_like(z)
        zl, zh = z[g.heads], z[g.tails]
        up = np.bincount(g.heads, self.oriented_beta(zl, zh) * noise, minlength=g.n_vertices)
        down = np.bincount(g.tails, self.oriented_beta(zh, zl) * noise, minlength=g.n_vertices)
        return up - down

    def conserved(self, z: np.ndarray) -> float:
        return float(np.sum(self.cutoff.energy_map_of_log(z)))

    def project(self, z: np.ndarray, target: float, iterations: int = 4) -> np.ndarray:
        """Move ``z`` along the gradient of the conserved quantity back onto its level set."""
        for _ in range(iterations):
            grad = np.exp(z) / self.cutoff.phi_of_log(z)
            gap = self.conserved(z) - target
            if gap == 0.0:
                break
            z = z - gap * grad / float(np.dot(grad, grad))
        return z


def simulate_log_coords(config: SdeRunConfig, cutoff: CutoffFamily, *, project: bool = True) -> TrajectoryRecord:
    """Integrate ``z = ln E`` with the cutoff coefficients.

    The Gaussian increments are drawn from the same stream and in the same
    order as :func:`simulate`, so both schemes are driven by identical noise
    whenever :func:`simulate` rejects no step. The record reports ``e**z``.
    """
    vector_field = LogCoordinateField(config.graph, config.model, cutoff)
    rng = make_rng(config.seed, SDE_STREAM, 0)
    z = np.log(np.asarray(config.initial_energies, dtype=float))
    target = vector_field.conserved(z)
    threshold = math.log(config.delta_stop) if config.delta_stop > 0 else -math.inf
    times = [0.0]
    samples = [np.exp(z)]
    stopped = bool(cluster_energy(np.exp(z), config.stop_cluster) <= config.delta_stop) if config.delta_stop > 0 else False
    stop_time = 0.0 if stopped else None
    max_drift = 0.0
    previous = 0.0
    for k in range(1, config.n_steps + 1):
        if stopped:
            break
        t = config.time_at(k)
        dt = t - previous
        noise = sample_edge_noise(config.graph, dt, rng, size=1)[0]
        z = z + vector_field.drift(z) * dt + vector_field.noise_term(z, noise)
        if project and config.graph.n_edges:
            z = vector_field.project(z, target)
        max_drift = max(max_drift, abs(vector_field.conserved(z) - target) / target)
        energies = np.exp(z)
        if config.delta_stop > 0 and np.log(cluster_energy(energies, config.stop_cluster)) <= threshold:
            stopped, stop_time = True, t
        if stopped or k % config.record_stride == 0 or k == config.n_steps:
            times.append(t)
            samples.append(energies)
        previous = t
    metadata = {"dt": config.step, "tEnd": config.t_end, "cutoffDelta": cutoff.delta, "maxConservedDrift": max_drift}
    return TrajectoryRecord(
        times=np.asarray(times),
        energies=np.stack(samples),
        stopped=stopped,
        stop_time=stop_time,
        seed=config.seed,
        config_digest=config.config_digest,
        metadata=metadata,
    )
