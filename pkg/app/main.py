"""Command-line entry point: ``energy-lab <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
3 failed verification.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from app.config import LabConfig, config_digest, default_output_dir, default_workers, load_config
from app.errors import ConfigError, LabError
from app.lab import greenkubo
from app.lab.assembly import build_graph, build_model, comparison_sde_config, micro_run_config, sde_run_config
from app.lab.coeffs import log_grid
from app.lab.micro.backends import TORUS_OBSERVABLES, CatMapTorus, make_backend, make_potential
from app.lab.micro.cutoffs import CutoffFamily
from app.lab.micro.dynamics import micro_ensemble, micro_simulate
from app.lab.micro.slowfast import simulate_slow_fast_map, write_slow_paths
from app.lab.records import write_ensemble, write_trajectory
from app.lab.sde import simulate, simulate_ensemble, simulate_log_coords
from app.lab.verify import compare_ladder, compare_micro_sde, run_suite
from app.ledger import build_run_entry, get_run_ledger

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3


class UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message, self.format_usage())


class RunContext:
    """Resolved inputs of one invocation."""

    def __init__(self, config: LabConfig, output_dir: Path, workers: int):
        self.config = config
        self.output_dir = output_dir
        self.workers = workers
        self.digest = config_digest(config)
        self.outputs: list[Path] = []
        self.summary: dict[str, Any] = {}
        self.exit_code = EXIT_OK

    @property
    def seed(self) -> int:
        return self.config.seed

    def write_json(self, name: str, payload: dict[str, Any]) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / name
        document = {"seed": self.seed, "configDigest": self.digest, **payload}
        path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.outputs.append(path)
        return path


def _simulate_sde(ctx: RunContext) -> None:
    section = ctx.config.sde
    run = sde_run_config(ctx.config)
    if section.log_coords:
        record = simulate_log_coords(run, CutoffFamily(section.cutoff_delta))
        ctx.outputs += write_trajectory(record, ctx.output_dir)
        ctx.summary = {"stopped": record.stopped, "finalEnergies": record.final_energies.tolist()}
    elif section.ensemble > 1:
        ensemble = simulate_ensemble(run, section.ensemble, batch_size=section.batch_size, workers=ctx.workers)
        ctx.outputs += write_ensemble(ensemble, ctx.output_dir)
        ctx.summary = {"members": len(ensemble), "stoppedFraction": ensemble.stopped_fraction()}
    else:
        record = simulate(run)
        ctx.outputs += write_trajectory(record, ctx.output_dir)
        ctx.summary = {"stopped": record.stopped, "finalEnergies": record.final_energies.tolist()}


def _simulate_micro(ctx: RunContext) -> None:
    section = ctx.config.micro
    if section.backend == "torus":
        paths = simulate_slow_fast_map(
            CatMapTorus(),
            ctx.config.greenkubo.observable,
            section.epsilon,
            section.t_slow,
            max(2, section.ensemble),
            ctx.seed,
            samples=section.samples,
        )
        ctx.outputs += write_slow_paths(paths, ctx.output_dir, ctx.digest)
        ctx.summary = {"finalVariance": paths.final_variance, "steps": paths.steps}
        return
    run = micro_run_config(ctx.config)
    if section.ensemble > 1:
        ensemble = micro_ensemble(run, section.ensemble, batch_size=section.batch_size, workers=ctx.workers)
        ctx.outputs += write_ensemble(ensemble, ctx.output_dir)
        ctx.summary = {"members": len(ensemble), "maxHamiltonianDrift": ensemble.metadata["maxHamiltonianDrift"]}
    else:
        record = micro_simulate(run)
        ctx.outputs += write_trajectory(record, ctx.output_dir)
        ctx.summary = {"finalEnergies": record.final_energies.tolist(), "maxHamiltonianDrift": record.metadata["maxHamiltonianDrift"]}


def _estimate_gamma(ctx: RunContext) -> None:
    gk = ctx.config.greenkubo
    micro = ctx.config.micro
    curve = greenkubo.estimate_gamma_curve(
        make_backend("hyperbolic"),
        make_potential(micro.potential, micro.bump_radius),
        log_grid(gk.tau_min, gk.tau_max, gk.tau_points),
        ensemble=gk.ensemble,
        seed=ctx.seed,
        horizon=gk.horizon,
        resolution=gk.resolution,
        max_points=gk.max_points,
        workers=ctx.workers,
        tail_from=gk.tail_from,
    )
    ctx.output_dir.mkdir(parents=True, exist_ok=True)
    table = curve.write(ctx.output_dir / "gamma_table.csv", header=[f"seed={ctx.seed}", f"config_digest={ctx.digest}"])
    ctx.outputs.append(table)
    ctx.write_json("gamma_report.json", curve.report())
    ctx.summary = {"nonpositive": curve.nonpositive, "tailResidual": curve.fit.relative_residual if curve.fit else None}


def _estimate_sigma(ctx: RunContext) -> None:
    gk = ctx.config.greenkubo
    fast_map = CatMapTorus()
    observable = TORUS_OBSERVABLES[gk.observable]
    estimate = greenkubo.estimate_sigma_sq_map(fast_map, observable, gk.lag_max, gk.sigma_ensemble, ctx.seed)
    oracle = greenkubo.birkhoff_variance_oracle(fast_map, observable, gk.oracle_steps, gk.oracle_ensemble, ctx.seed)
    ctx.write_json("sigma.json", {"observable": gk.observable, "lagSum": estimate.model_dump(), "oracle": oracle.model_dump()})
    ctx.summary = {"sigmaSq": estimate.value, "oracle": oracle.value}


def _verify(ctx: RunContext) -> None:
    suite = run_suite(ctx.config, workers=ctx.workers, output_dir=ctx.output_dir)
    ctx.outputs += [ctx.output_dir / "reports.json", ctx.output_dir / "summary.csv"]
    ctx.summary = {"passed": suite.passed, "failures": suite.failures(), "reports": len(suite.reports)}
    if not suite.passed:
        ctx.exit_code = EXIT_VERIFICATION


def _compare(ctx: RunContext) -> None:
    micro = ctx.config.micro
    graph = build_graph(ctx.config.graph)
    model = build_model(ctx.config.coefficients)
    if model.is_analytic:
        logger.warning("compare runs the SDE with the analytic model; an estimated gamma table matches the micro dynamics")
    if model.d != 2:
        logger.info("micro dynamics live on a surface; running the SDE with d=2 instead of d=%d", model.d)
        model = model.with_dimension(2)
    sde = comparison_sde_config(ctx.config, graph=graph, model=model)
    sde_ensemble = simulate_ensemble(sde, micro.ensemble, batch_size=ctx.config.sde.batch_size, workers=ctx.workers, record=False)
    reports = []
    for epsilon in micro.epsilon_ladder:
        run = micro_run_config(ctx.config, epsilon=epsilon, graph=graph)
        ensemble = micro_ensemble(run, micro.ensemble, batch_size=micro.batch_size, workers=ctx.workers)
        report = compare_micro_sde(ensemble, sde_ensemble)
        report.name = f"micro-vs-sde-eps-{epsilon:g}"
        reports.append(report)
    ladder = compare_ladder(micro.epsilon_ladder, reports)
    ctx.write_json(
        "compare.json",
        {
            "passed": ladder.passed,
            "ladder": ladder.model_dump(mode="json", by_alias=True),
            "reports": [r.model_dump(mode="json", by_alias=True) for r in reports],
        },
    )
    ctx.summary = {"passed": ladder.passed, "distances": ladder.details["distances"]}
    if not ladder.passed:
        ctx.exit_code = EXIT_VERIFICATION


SUBCOMMANDS: dict[str, tuple[Callable[[RunContext], None], str]] = {
    "simulate-sde": (_simulate_sde, "integrate the mesoscopic energy SDE"),
    "simulate-micro": (_simulate_micro, "integrate the microscopic coupled dynamics or the slow-fast map"),
    "estimate-gamma": (_estimate_gamma, "estimate the Gamma curve on the hyperbolic backend"),
    "estimate-sigma": (_estimate_sigma, "lag-sum variance of a cat-map observable with its Birkhoff oracle"),
    "verify": (_verify, "run the verification suite"),
    "compare": (_compare, "compare micro and SDE energy marginals along the epsilon ladder"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="energy-lab", description="Energy transport laboratory.")
    parser.add_argument("--config", type=Path, help="JSON configuration file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="overrides the configured seed")
    parser.add_argument("--output-dir", type=Path, help="defaults to $ENERGY_LAB_OUTPUT_DIR or ./runs")
    parser.add_argument("--workers", type=int, help="defaults to $ENERGY_LAB_WORKERS or 1")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name, (_, help_text) in SUBCOMMANDS.items():
        sub.add_parser(name, help=help_text)
    return parser


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _record(ctx: RunContext | None, subcommand: str, exit_code: int, config: LabConfig | None) -> None:
    if config is None:
        return
    entry = build_run_entry(
        subcommand=subcommand,
        seed=config.seed,
        config_digest=ctx.digest if ctx is not None else config_digest(config),
        exit_code=exit_code,
        outputs=ctx.outputs if ctx is not None else (),
        summary=ctx.summary if ctx is not None else None,
    )
    try:
        get_run_ledger().record_run(entry)
    except RuntimeError as exc:
        logger.error("%s", exc)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"energy-lab: error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose)

    config: LabConfig | None = None
    ctx: RunContext | None = None
    try:
        config = load_config(args.config).with_seed(args.seed)
        workers = args.workers if args.workers is not None else default_workers()
        ctx = RunContext(config, args.output_dir or default_output_dir(), max(1, workers))
        logger.info("%s: seed=%d digest=%s", args.subcommand, ctx.seed, ctx.digest[:12])
        handler, _ = SUBCOMMANDS[args.subcommand]
        handler(ctx)
        exit_code = ctx.exit_code
    except ConfigError as exc:
        logger.error("%s", exc)
        sys.stderr.write(f"energy-lab: {exc}\n")
        exit_code = EXIT_USAGE
    except (LabError, OSError) as exc:
        logger.error("%s failed: %s", args.subcommand, exc)
        sys.stderr.write(f"energy-lab: {exc}\n")
        exit_code = EXIT_RUNTIME
    _record(ctx, args.subcommand, exit_code, config)
    logger.info("%s finished with exit code %d", args.subcommand, exit_code)
    return exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
