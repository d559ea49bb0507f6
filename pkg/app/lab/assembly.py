"""Turn validated configuration sections into lab objects."""

from __future__ import annotations

from app.config import CoefficientConfig, GraphConfig, GraphKind, LabConfig, config_digest
from app.errors import ConfigError
from app.lab import topology
from app.lab.coeffs import CoefficientModel, load_gamma_table
from app.lab.micro.dynamics import MicroConfig
from app.lab.sde import SdeRunConfig
from app.lab.topology import InteractionGraph


def build_graph(section: GraphConfig) -> InteractionGraph:
    if section.kind is GraphKind.CHAIN:
        return topology.build_chain(section.n)
    if section.kind is GraphKind.COMPLETE:
        return topology.build_complete_graph(section.n)
    if section.kind is GraphKind.LATTICE:
        return topology.build_lattice_region(section.lattice_dim, section.box)
    return topology.load_graph(section.path)


def build_model(section: CoefficientConfig) -> CoefficientModel:
    if section.kind == "analytic-model":
        return CoefficientModel.analytic(section.A, section.d)
    return load_gamma_table(section.gamma_table, d=section.d)


def sde_run_config(config: LabConfig, *, graph: InteractionGraph | None = None, model: CoefficientModel | None = None) -> SdeRunConfig:
    section = config.sde
    try:
        return SdeRunConfig(
            graph=graph or build_graph(config.graph),
            model=model or build_model(config.coefficients),
            initial_energies=tuple(section.initial_energies),
            t_end=section.t_end,
            dt=section.dt,
            delta_stop=section.delta_stop,
            seed=config.seed,
            max_halvings=section.max_halvings,
            record_stride=section.record_stride,
            stop_cluster=section.stop_cluster,
            config_digest=config_digest(config),
        )
    except ValueError as exc:
        raise ConfigError(f"sde: {exc}") from exc


def micro_run_config(config: LabConfig, *, epsilon: float | None = None, graph: InteractionGraph | None = None) -> MicroConfig:
    section = config.micro
    try:
        return MicroConfig(
            graph=graph or build_graph(config.graph),
            initial_energies=tuple(section.initial_energies),
            epsilon=section.epsilon if epsilon is None else epsilon,
            delta=section.delta,
            h=section.h,
            t_slow=section.t_slow,
            epsilon_max=section.epsilon_max,
            backend=section.backend,
            potential=section.potential,
            bump_radius=section.bump_radius,
            samples=section.samples,
            seed=config.seed,
            config_digest=config_digest(config),
        )
    except ValueError as exc:
        raise ConfigError(f"micro: {exc}") from exc


def comparison_sde_config(config: LabConfig, *, graph: InteractionGraph, model: CoefficientModel) -> SdeRunConfig:
    """SDE run matched to the micro section: its energies, horizon ``t_slow`` and seed."""
    micro = config.micro
    try:
        return SdeRunConfig(
            graph=graph,
            model=model,
            initial_energies=tuple(micro.initial_energies),
            t_end=micro.t_slow,
            dt=config.sde.dt,
            seed=config.seed,
            config_digest=config_digest(config),
        )
    except ValueError as exc:
        raise ConfigError(f"compare: {exc}") from exc
