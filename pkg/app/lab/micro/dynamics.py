"""Microscopic modified dynamics on the unit tangent bundle of the octagon surface.

Every site carries a frame ``g_x`` and a log-energy ``z_x``. With
``S_x = sum_{y ~ x} phi_y u_y`` (``phi_y = phi_delta(e**z_y)`` and ``u`` the
single-site bump of a product potential) the equations are

* ``z_x' = -eps sqrt(2) e**(-z_x/2) phi_x (L_x u)(g_x) S_x``
* ``g_x' = g_x (alpha_x X + kappa_x K)``

where ``X`` generates the geodesic flow, ``K`` rotates the fibre,
``alpha_x = omega_delta(z_x) + eps zeta_delta(z_x) u_x S_x`` and
``kappa_x = -(eps / sqrt(2)) e**(-z_x/2) phi_x (N_x u)(g_x) S_x`` with ``N_x``
the unit normal derivative. The flow keeps

``H = sum_x energy_map(e**z_x) + eps sum_{x ~ y} phi_x phi_y V(q_x, q_y)``

constant, which the integrator monitors.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np

from app.errors import MicroIntegrationError
from app.lab.micro.backends import (
    FLOW_GENERATOR,
    ROTATION_GENERATOR,
    HyperbolicSurface,
    ProductBumpPotential,
    make_backend,
    make_potential,
    renormalize,
)
from app.lab.micro.cutoffs import CutoffFamily
from app.lab.records import EnsembleRecord, TrajectoryRecord
from app.lab.rng import make_rng
from app.lab.topology import InteractionGraph

logger = logging.getLogger(__name__)

INIT_STREAM = "micro-init"
FROZEN_TOLERANCE = 1e-8
DRIFT_WARNING = 1e-6
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class MicroConfig:
    graph: InteractionGraph
    initial_energies: tuple[float, ...]
    epsilon: float
    delta: float
    h: float = 0.01
    t_slow: float = 0.5
    epsilon_max: float = 0.5
    backend: str = "hyperbolic"
    potential: str = "product-bump"
    bump_radius: float | None = None
    physical_time: float | None = None
    samples: int = 50
    seed: int = 0
    config_digest: str = ""

    def __post_init__(self) -> None:
        energies = tuple(float(e) for e in self.initial_energies)
        object.__setattr__(self, "initial_energies", energies)
        if len(energies) != self.graph.n_vertices:
            raise ValueError(f"{len(energies)} initial energies for {self.graph.n_vertices} vertices")
        if not all(e > 0 for e in energies):
            raise ValueError("initial energies must satisfy E_x > 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.h > 0 or self.samples < 1:
            raise ValueError("h must be positive and samples at least 1")
        if self.epsilon == 0 and self.physical_time is None:
            raise ValueError("epsilon = 0 needs an explicit physical_time")

    @property
    def horizon(self) -> float:
        """Physical integration time: ``t_slow / eps**2`` unless given explicitly."""
        if self.physical_time is not None:
            return float(self.physical_time)
        return self.t_slow / self.epsilon**2

    @property
    def n_steps(self) -> int:
        return max(1, int(math.ceil(self.horizon / self.h - 1e-9)))

    @property
    def step(self) -> float:
        return self.horizon / self.n_steps

    @property
    def stride(self) -> int:
        return max(1, self.n_steps // self.samples)

    def time_scale(self) -> float:
        """Factor turning physical time into the reported time axis."""
        return self.epsilon**2 if self.epsilon > 0 else 1.0


class MicroSystem:
    """Vector field and conserved energy for states of shape ``(batch, n, 2, 2)`` / ``(batch, n)``."""

    def __init__(self, graph: InteractionGraph, cutoff: CutoffFamily, surface: HyperbolicSurface, potential, epsilon: float):
        self.graph = graph
        self.cutoff = cutoff
        self.surface = surface
        self.potential = potential
        self.epsilon = float(epsilon)
        self.adjacency = graph.adjacency_matrix()

    def _neighbour_sum(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(self.adjacency @ values.T).T

    def _bump(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        u = self.potential.single(g)
        if isinstance(self.potential, ProductBumpPotential):
            return u, self.potential.single_current(self.surface, g), self.potential.single_normal(self.surface, g)
        zeros = np.zeros_like(u)
        return u, zeros, zeros

    def rates(self, g: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        eps = self.epsilon
        phi = self.cutoff.phi_of_log(z)
        u, du_flow, du_normal = self._bump(g)
        coupling = self._neighbour_sum(phi * u)
        weight = eps * np.exp(-0.5 * z) * phi * coupling
        z_dot = -SQRT2 * weight * du_flow
        alpha = self.cutoff.omega(z) + eps * self.cutoff.zeta(z) * u * coupling
        kappa = -weight * du_normal / SQRT2
        generator = alpha[..., None, None] * FLOW_GENERATOR + kappa[..., None, None] * ROTATION_GENERATOR
        return g @ generator, z_dot

    def hamiltonian(self, g: np.ndarray, z: np.ndarray) -> np.ndarray:
        energy = np.sum(self.cutoff.energy_map_of_log(z), axis=-1)
        if self.epsilon == 0 or self.graph.n_edges == 0:
            return energy
        phi = self.cutoff.phi_of_log(z)
        u = self.potential.single(g)
        pu = phi * u
        heads, tails = self.graph.heads, self.graph.tails
        return energy + self.epsilon * np.sum(pu[..., heads] * pu[..., tails], axis=-1)

    def rk4_step(self, g: np.ndarray, z: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
        g1, z1 = self.rates(g, z)
        g2, z2 = self.rates(g + 0.5 * h * g1, z + 0.5 * h * z1)
        g3, z3 = self.rates(g + 0.5 * h * g2, z + 0.5 * h * z2)
        g4, z4 = self.rates(g + h * g3, z + h * z3)
        g_next = g + (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
        z_next = z + (h / 6.0) * (z1 + 2.0 * z2 + 2.0 * z3 + z4)
        return self.surface.reduce(renormalize(g_next)), z_next


@dataclass
class MicroBatchResult:
    times: np.ndarray
    energies: np.ndarray
    frames: np.ndarray
    log_energies: np.ndarray
    hamiltonian_drift: np.ndarray


def build_system(config: MicroConfig) -> MicroSystem:
    surface = make_backend(config.backend)
    if not isinstance(surface, HyperbolicSurface):
        raise MicroIntegrationError(f"the coupled dynamics needs the hyperbolic backend, got {config.backend!r}")
    potential = make_potential(config.potential, config.bump_radius)
    return MicroSystem(config.graph, CutoffFamily(config.delta), surface, potential, config.epsilon)


def initial_frames(config: MicroConfig, surface: HyperbolicSurface, members: range) -> np.ndarray:
    """Liouville-distributed frames; member ``i`` draws from its own stream."""
    n = config.graph.n_vertices
    return np.stack([surface.sample_uniform(make_rng(config.seed, INIT_STREAM, i), n) for i in members])


def integrate(system: MicroSystem, config: MicroConfig, g: np.ndarray, z: np.ndarray, *, steps: int | None = None) -> MicroBatchResult:
    steps = config.n_steps if steps is None else steps
    h = config.step
    scale = config.time_scale()
    h0 = system.hamiltonian(g, z)
    z0 = z.copy()
    times = [0.0]
    samples = [np.exp(z)]
    drift = np.zeros(z.shape[0])
    for k in range(1, steps + 1):
        g, z = system.rk4_step(g, z, h)
        if k % config.stride == 0 or k == steps:
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(g))):
                raise MicroIntegrationError(f"non-finite micro state at physical time {k * h:.6g}; reduce h")
            if system.epsilon == 0:
                change = float(np.max(np.abs(np.exp(z) - np.exp(z0))))
                if change > FROZEN_TOLERANCE:
                    raise MicroIntegrationError(f"energies moved by {change:.3e} with eps = 0; reduce h")
            drift = np.maximum(drift, np.abs(system.hamiltonian(g, z) - h0) / np.abs(h0))
            times.append(k * h * scale)
            samples.append(np.exp(z))
    worst = float(drift.max(initial=0.0))
    if worst > DRIFT_WARNING:
        logger.warning("relative drift of the conserved energy reached %.3e; consider a smaller h", worst)
    return MicroBatchResult(
        times=np.asarray(times),
        energies=np.stack(samples),
        frames=g,
        log_energies=z,
        hamiltonian_drift=drift,
    )


def _check_coupling(config: MicroConfig) -> None:
    if config.epsilon > config.epsilon_max:
        raise MicroIntegrationError(f"epsilon {config.epsilon} exceeds the configured bound {config.epsilon_max}")


def _metadata(config: MicroConfig, result: MicroBatchResult) -> dict[str, Any]:
    return {
        "epsilon": config.epsilon,
        "delta": config.delta,
        "h": config.step,
        "physicalTime": config.horizon,
        "timeAxis": "slow" if config.epsilon > 0 else "physical",
        "backend": config.backend,
        "potential": config.potential,
        "maxHamiltonianDrift": float(result.hamiltonian_drift.max(initial=0.0)),
    }


def _run_members(config: MicroConfig, members: range) -> MicroBatchResult:
    system = build_system(config)
    g = initial_frames(config, system.surface, members)
    z = np.tile(np.log(np.asarray(config.initial_energies)), (len(members), 1))
    return integrate(system, config, g, z)


def micro_simulate(config: MicroConfig) -> TrajectoryRecord:
    _check_coupling(config)
    result = _run_members(config, range(1))
    logger.info("micro run finished: eps=%g steps=%d", config.epsilon, config.n_steps)
    return TrajectoryRecord(
        times=result.times,
        energies=result.energies[:, 0],
        stopped=False,
        stop_time=None,
        seed=config.seed,
        config_digest=config.config_digest,
        metadata=_metadata(config, result),
    )


def micro_ensemble(config: MicroConfig, n_members: int, *, batch_size: int = 256, workers: int = 1) -> EnsembleRecord:
    """Independent members; member ``i`` reproduces regardless of batching."""
    _check_coupling(config)
    spans = [range(start, min(start + batch_size, n_members)) for start in range(0, n_members, max(1, batch_size))]
    if workers <= 1 or len(spans) == 1:
        results = [_run_members(config, span) for span in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda span: _run_members(config, span), spans))
    members = []
    for result in results:
        metadata = _metadata(config, result)
        for i in range(result.energies.shape[1]):
            members.append(
                TrajectoryRecord(
                    times=result.times,
                    energies=result.energies[:, i],
                    stopped=False,
                    stop_time=None,
                    seed=config.seed,
                    config_digest=config.config_digest,
                    metadata={"maxHamiltonianDrift": float(result.hamiltonian_drift[i])},
                )
            )
    metadata = {**_metadata(config, results[0]), "maxHamiltonianDrift": max(float(r.hamiltonian_drift.max()) for r in results)}
    return EnsembleRecord(members=members, seed=config.seed, config_digest=config.config_digest, metadata=metadata)


@dataclass
class ReversalReport:
    log_energy_error: float
    position_error: float
    velocity_error: float


def check_time_reversal(config: MicroConfig, steps: int = 200) -> ReversalReport:
    """Run ``steps`` forward, reverse the velocities, run ``steps`` forward again.

    The reversed end state should coincide with the reversed initial state:
    same energies and base points, opposite velocities.
    """
    system = build_system(config)
    g0 = initial_frames(config, system.surface, range(1))
    z0 = np.log(np.asarray(config.initial_energies))[None, :]
    g, z = g0, z0.copy()
    for _ in range(steps):
        g, z = system.rk4_step(g, z, config.step)
    g = system.surface.reverse(g)
    for _ in range(steps):
        g, z = system.rk4_step(g, z, config.step)
    surface = system.surface
    return ReversalReport(
        log_energy_error=float(np.max(np.abs(z - z0))),
        position_error=float(np.max(np.abs(surface.base_point(g) - surface.base_point(g0)))),
        velocity_error=float(np.max(np.abs(surface.velocity(g) + surface.velocity(g0)))),
    )
