"""Statistical checks of the energy model.

Every check returns a :class:`HypothesisReport`. Reports that are ``gated``
decide the outcome of :func:`run_suite`; the others are informational.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from app.config import LabConfig, config_digest
from app.errors import VerificationError
from app.lab import coeffs, greenkubo
from app.lab.assembly import build_model, comparison_sde_config, micro_run_config, sde_run_config
from app.lab.coeffs import CoefficientModel
from app.lab.micro.backends import TORUS_OBSERVABLES, CatMapTorus, make_backend, make_potential
from app.lab.micro.dynamics import DRIFT_WARNING, FROZEN_TOLERANCE, check_time_reversal, micro_ensemble, micro_simulate
from app.lab.records import EnsembleRecord, TrajectoryRecord
from app.lab.rng import make_rng
from app.lab.sde import SdeRunConfig, cluster_energy, integrate_ensemble, simulate, simulate_ensemble
from app.lab.topology import InteractionGraph, build_chain, build_complete_graph

logger = logging.getLogger(__name__)


class HypothesisReport(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    name: str
    statistic: float
    p_value: float | None = Field(None, alias="pValue")
    ci: tuple[float, float] | None = None
    level: float | None = None
    passed: bool
    gated: bool = True
    sample_sizes: dict[str, int] = Field(default_factory=dict, alias="sampleSizes")
    seed: int | None = None
    config_digest: str = Field("", alias="configDigest")
    details: dict[str, Any] = Field(default_factory=dict)


class SuiteReport(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    seed: int
    config_digest: str = Field("", alias="configDigest")
    reports: list[HypothesisReport] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(report.passed for report in self.reports if report.gated)

    def failures(self) -> list[str]:
        return [report.name for report in self.reports if report.gated and not report.passed]

    def write(self, directory: Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        json_path = directory / "reports.json"
        csv_path = directory / "summary.csv"
        payload = {"passed": self.passed, **self.model_dump(mode="json", by_alias=True)}
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        with csv_path.open("w", newline="", encoding="utf-8") as handle:
            handle.write(f"# seed={self.seed}\n# config_digest={self.config_digest}\n")
            writer = csv.writer(handle)
            writer.writerow(["name", "statistic", "p_value", "ci_low", "ci_high", "passed", "gated"])
            for r in self.reports:
                low, high = r.ci if r.ci is not None else ("", "")
                writer.writerow([r.name, format(r.statistic, ".10g"), "" if r.p_value is None else format(r.p_value, ".6g"), low, high, r.passed, r.gated])
        return [json_path, csv_path]


def _stamp(report: HypothesisReport, seed: int | None, digest: str) -> HypothesisReport:
    report.seed = seed
    report.config_digest = digest
    return report


# -- invariant measure -----------------------------------------------------


def gibbs_marginal(d: int, beta: float):
    """Single-site marginal of ``prod E**(d/2 - 1) exp(-beta E)``: Gamma(d/2, rate beta)."""
    return stats.gamma(a=0.5 * d, scale=1.0 / beta)


def sample_gibbs(graph: InteractionGraph, d: int, beta: float, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.gamma(0.5 * d, 1.0 / beta, size=(n, graph.n_vertices))


def integrated_autocorrelation_time(series: np.ndarray) -> float:
    """Initial-positive-sequence estimate from the member-averaged autocovariance.

    ``series`` is ``(n,)`` or ``(members, n)``; the result is at least 1.
    """
    x = np.atleast_2d(np.asarray(series, dtype=float))
    n = x.shape[1]
    if n < 2:
        return 1.0
    centred = x - x.mean()
    spectrum = np.fft.rfft(centred, 2 * n, axis=1)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), axis=1)[:, :n].mean(axis=0) / n
    if acov[0] <= 0:
        return 1.0
    rho = acov / acov[0]
    total = 0.0
    for k in range(n // 2):
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0:
            break
        total += pair
    return max(1.0, -1.0 + 2.0 * total)


def effective_sample_size(series: np.ndarray) -> float:
    x = np.atleast_2d(np.asarray(series, dtype=float))
    return x.size / integrated_autocorrelation_time(x)


def test_invariant_marginal(
    model: CoefficientModel,
    graph: InteractionGraph,
    beta: float,
    *,
    members: int,
    t_run: float,
    dt: float,
    stride: int,
    seed: int,
    site: int = 0,
    level: float = 0.01,
    min_ess: int = 1000,
    batch_size: int = 1000,
    workers: int = 1,
) -> HypothesisReport:
    """Stationarity of Gibbs-distributed ensembles under the SDE.

    Members start from the product density and the pooled single-site
    samples are tested against Gamma(d/2, beta) with a KS test whose sample
    size is the effective one.
    """
    initial = sample_gibbs(graph, model.d, beta, members, make_rng(seed, "gibbs-initial", 0))
    config = SdeRunConfig(graph=graph, model=model, initial_energies=tuple(initial[0]), t_end=t_run, dt=dt, seed=seed, record_stride=stride)
    results = integrate_ensemble(config, initial, batch_size=batch_size, workers=workers, record=True, purpose="gibbs")
    series = np.concatenate([result.samples[:, :, site].T for result in results], axis=0)
    ess = effective_sample_size(series)
    if ess < min_ess:
        raise VerificationError(f"only {ess:.0f} effective samples (need {min_ess}); lengthen the run or add members")
    target = gibbs_marginal(model.d, beta)
    statistic = float(stats.kstest(series.ravel(), target.cdf).statistic)
    n_eff = max(1, int(round(ess)))
    p_value = float(stats.kstwo.sf(statistic, n_eff))
    return HypothesisReport(
        name="invariant-marginal",
        statistic=statistic,
        p_value=p_value,
        level=level,
        passed=p_value >= level,
        sample_sizes={"members": members, "samples": int(series.size), "effective": n_eff},
        details={"targetMean": 0.5 * model.d / beta, "sampleMean": float(series.mean()), "beta": beta, "d": model.d},
    )


def calibrate_ks(n: int, repetitions: int, level: float, seed: int, *, d: int = 3, beta: float = 1.0, tolerance: float = 0.02) -> HypothesisReport:
    """Rejection rate of the KS test on exact Gamma samples; should match ``level``."""
    rng = make_rng(seed, "ks-calibration", 0)
    target = gibbs_marginal(d, beta)
    p_values = np.array([stats.kstest(rng.gamma(0.5 * d, 1.0 / beta, size=n), target.cdf).pvalue for _ in range(repetitions)])
    rate = float(np.mean(p_values < level))
    uniformity = stats.kstest(p_values, "uniform")
    return HypothesisReport(
        name="ks-calibration",
        statistic=rate,
        level=level,
        passed=abs(rate - level) <= tolerance,
        sample_sizes={"n": n, "repetitions": repetitions},
        details={"pValueUniformityStatistic": float(uniformity.statistic), "pValueUniformityP": float(uniformity.pvalue)},
    )


# -- reversibility -----------------------------------------------------------


@dataclass(frozen=True)
class Bump:
    """``exp(1 - 1 / (1 - r**2))`` with ``r = (E_site - centre) / width``."""

    site: int
    centre: float
    width: float

    def parts(self, energies: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Value, first log-derivative and the derivative of the latter."""
        r = (energies[..., self.site] - self.centre) / self.width
        inside = r * r < 1.0
        q = np.where(inside, 1.0 - r * r, 1.0)
        value = np.where(inside, np.exp(1.0 - 1.0 / q), 0.0)
        log_slope = np.where(inside, -2.0 * r / (self.width * q * q), 0.0)
        log_curvature = np.where(inside, -(2.0 / self.width**2) * (1.0 / q**2 + 4.0 * r * r / q**3), 0.0)
        return value, log_slope, log_curvature


@dataclass(frozen=True)
class BumpProduct:
    bumps: tuple[Bump, ...]

    def parts(self, energies: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``f``, ``d_x ln f`` and ``d_x d_x ln f`` per site."""
        value = np.ones(energies.shape[:-1])
        slope = np.zeros(energies.shape)
        curvature = np.zeros(energies.shape)
        for bump in self.bumps:
            v, s, c = bump.parts(energies)
            value = value * v
            slope[..., bump.site] += s
            curvature[..., bump.site] += c
        return value, slope, curvature


def apply_generator(model: CoefficientModel, graph: InteractionGraph, energies: np.ndarray, fn: BumpProduct) -> np.ndarray:
    """``L f = sum_edges a (d_x - d_y) f + beta_sq (d_x - d_y)**2 f``."""
    value, slope, curvature = fn.parts(energies)
    out = np.zeros(energies.shape[:-1])
    for x, y in graph.edges:
        ex, ey = energies[..., x], energies[..., y]
        a = np.asarray(coeffs.drift(model, ex, ey))
        b2 = np.asarray(coeffs.beta_sq(model, ex, ey))
        gap = slope[..., x] - slope[..., y]
        out += value * (a * gap + b2 * (gap * gap + curvature[..., x] + curvature[..., y]))
    return out


REVERSIBILITY_CATALOG: tuple[tuple[str, BumpProduct, BumpProduct], ...] = (
    ("disjoint-sites", BumpProduct((Bump(0, 1.0, 0.8),)), BumpProduct((Bump(1, 1.5, 1.0),))),
    ("same-site", BumpProduct((Bump(0, 0.8, 0.6),)), BumpProduct((Bump(0, 1.5, 1.2),))),
    ("product-vs-single", BumpProduct((Bump(0, 1.0, 0.8), Bump(1, 1.0, 0.8))), BumpProduct((Bump(1, 2.0, 1.5),))),
    ("single-vs-product", BumpProduct((Bump(0, 0.5, 0.4),)), BumpProduct((Bump(0, 0.5, 0.4), Bump(1, 1.2, 1.0)))),
    ("crossed-products", BumpProduct((Bump(1, 1.0, 0.9), Bump(0, 2.0, 1.5))), BumpProduct((Bump(0, 1.0, 0.9),))),
)


def test_reversibility(
    model: CoefficientModel,
    graph: InteractionGraph,
    beta: float,
    pair: tuple[BumpProduct, BumpProduct],
    *,
    samples: int,
    seed: int,
    name: str = "reversibility",
    z: float = 3.0,
    chunk: int = 200_000,
) -> HypothesisReport:
    """Monte Carlo ``E(phi L h) - E(h L phi)`` under the Gibbs density."""
    phi, h = pair
    rng = make_rng(seed, "reversibility", 0)
    total = total_sq = lhs = rhs = 0.0
    done = 0
    while done < samples:
        size = min(chunk, samples - done)
        energies = sample_gibbs(graph, model.d, beta, size, rng)
        left = phi.parts(energies)[0] * apply_generator(model, graph, energies, h)
        right = h.parts(energies)[0] * apply_generator(model, graph, energies, phi)
        difference = left - right
        total += float(difference.sum())
        total_sq += float((difference * difference).sum())
        lhs += float(left.sum())
        rhs += float(right.sum())
        done += size
    mean = total / samples
    variance = max(total_sq / samples - mean * mean, 0.0) * samples / (samples - 1)
    stderr = math.sqrt(variance / samples)
    return HypothesisReport(
        name=name,
        statistic=mean,
        ci=(mean - z * stderr, mean + z * stderr),
        passed=abs(mean) <= z * stderr + 1e-15,
        sample_sizes={"samples": samples},
        details={"phiLh": lhs / samples, "hLphi": rhs / samples, "stderr": stderr, "beta": beta},
    )


# -- drift identity ----------------------------------------------------------


def divergence_drift(model: CoefficientModel, Ex, Ey, step: float = 1e-5, beta: float = 1.0) -> np.ndarray:
    """``(1/h0) (d_x - d_y)(h0 beta_sq)`` with central differences in ``ln E``."""
    s = np.asarray(Ex, dtype=float)
    t = np.asarray(Ey, dtype=float)
    half = 0.5 * model.d - 1.0

    def weighted(x, y):
        return x**half * y**half * np.exp(-beta * (x + y)) * np.asarray(coeffs.beta_sq(model, x, y))

    up, down = math.exp(step), math.exp(-step)
    d_x = (weighted(s * up, t) - weighted(s * down, t)) / (s * (up - down))
    d_y = (weighted(s, t * up) - weighted(s, t * down)) / (t * (up - down))
    return (d_x - d_y) / (s**half * t**half * np.exp(-beta * (s + t)))


def test_drift_identity(
    model: CoefficientModel,
    grid: tuple[np.ndarray, np.ndarray] | None = None,
    *,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> HypothesisReport:
    s, t = grid if grid is not None else coeffs.pair_grid(0.1, 10.0, 20)
    reference = np.asarray(coeffs.drift(model, s, t))
    rebuilt = divergence_drift(model, s, t, step)
    d_s, d_t = (np.abs(np.asarray(v)) for v in coeffs.beta_sq_partials(model, s, t))
    b2 = np.asarray(coeffs.beta_sq(model, s, t))
    scale = np.maximum(np.abs(reference), d_s + d_t + 0.5 * abs(model.d - 2) * (1.0 / s + 1.0 / t) * b2)
    deviation = np.abs(rebuilt - reference) / scale
    worst = int(np.argmax(deviation))
    return HypothesisReport(
        name="drift-identity",
        statistic=float(deviation[worst]),
        passed=bool(deviation[worst] <= tolerance),
        sample_sizes={"points": int(s.size)},
        details={"argmax": [float(s[worst]), float(t[worst])], "tolerance": tolerance, "step": step, "d": model.d},
    )


# -- hitting and downcrossings -----------------------------------------------


class HittingRow(BaseModel):
    delta: float
    hits: int
    trials: int
    probability: float
    ci_low: float
    ci_high: float


class HittingTable(BaseModel):
    rows: list[HittingRow]
    horizon: float
    d: int
    seed: int
    confidence: float

    @property
    def probabilities(self) -> list[float]:
        return [row.probability for row in self.rows]


def estimate_hitting_probability(
    model: CoefficientModel,
    graph: InteractionGraph,
    initial: Sequence[float],
    horizon: float,
    deltas: Sequence[float],
    ensemble: int,
    seed: int,
    *,
    dt: float | None = None,
    cluster: int = 1,
    confidence: float = 0.95,
    batch_size: int = 1000,
    workers: int = 1,
) -> HittingTable:
    """``P(tau_delta < T)`` for every ``delta`` from one ensemble's running minima."""
    if model.d < 3:
        logger.warning("hitting probabilities at d=%d are outside the range where zero is proven unreachable", model.d)
    config = SdeRunConfig(graph=graph, model=model, initial_energies=tuple(initial), t_end=horizon, dt=dt, seed=seed, stop_cluster=cluster)
    start = np.tile(np.asarray(config.initial_energies), (ensemble, 1))
    results = integrate_ensemble(config, start, batch_size=batch_size, workers=workers, record=False, purpose="hitting")
    minima = np.concatenate([result.running_min for result in results])
    rows = []
    for delta in sorted(deltas, reverse=True):
        hits = int(np.sum(minima <= delta))
        interval = stats.binomtest(hits, ensemble).proportion_ci(confidence_level=confidence, method="wilson")
        rows.append(HittingRow(delta=delta, hits=hits, trials=ensemble, probability=hits / ensemble, ci_low=float(interval.low), ci_high=float(interval.high)))
    return HittingTable(rows=rows, horizon=horizon, d=model.d, seed=seed, confidence=confidence)


def test_unreachability_trend(table: HittingTable) -> HypothesisReport:
    """Hitting probability falls as delta shrinks; last below half the first with confidence."""
    p = table.probabilities
    strict = all(b < a for a, b in zip(p, p[1:]))
    first, last = table.rows[0], table.rows[-1]
    separated = last.ci_high < 0.5 * first.ci_low
    return HypothesisReport(
        name="unreachability-trend",
        statistic=last.probability,
        ci=(last.ci_low, last.ci_high),
        passed=strict and separated,
        sample_sizes={"trials": first.trials},
        details={"table": table.model_dump(), "strictlyDecreasing": strict},
    )


def test_small_site_drift(
    model: CoefficientModel,
    graph: InteractionGraph,
    energies: Sequence[float],
    *,
    dt: float,
    steps: int,
    ensemble: int,
    seed: int,
    level: float = 0.01,
) -> HypothesisReport:
    """One-sided t-test that the smallest site gains energy over its first few steps."""
    site = int(np.argmin(energies))
    config = SdeRunConfig(graph=graph, model=model, initial_energies=tuple(energies), t_end=dt * steps, dt=dt, seed=seed)
    start = np.tile(np.asarray(config.initial_energies), (ensemble, 1))
    results = integrate_ensemble(config, start, record=False, purpose="small-site")
    increments = np.concatenate([result.final[:, site] for result in results]) - energies[site]
    outcome = stats.ttest_1samp(increments, 0.0, alternative="greater")
    expected = sum(float(coeffs.drift(model, energies[site], energies[y])) for y in graph.adjacency[site]) * dt * steps
    return HypothesisReport(
        name="small-site-drift",
        statistic=float(outcome.statistic),
        p_value=float(outcome.pvalue),
        level=level,
        passed=float(outcome.pvalue) < level,
        sample_sizes={"ensemble": ensemble, "steps": steps},
        details={"site": site, "meanIncrement": float(increments.mean()), "expectedIncrement": expected},
    )


def count_downcrossings(path: Sequence[float], lower: float, upper: float) -> int:
    """Completed passages from ``>= upper`` down to ``<= lower``."""
    if not lower < upper:
        raise ValueError("lower level must be below the upper level")
    count = 0
    armed = False
    for value in path:
        if value >= upper:
            armed = True
        elif armed and value <= lower:
            count += 1
            armed = False
    return count


def downcrossing_profile(ensemble: EnsembleRecord, deltas: Sequence[float], cluster: int = 1) -> list[dict[str, float]]:
    """Mean downcrossings of ``[ln delta, ln(delta)/2]`` by ``ln`` of the cluster energy."""
    profile = []
    for delta in deltas:
        if not 0 < delta < 1:
            raise ValueError("downcrossing levels need 0 < delta < 1")
        lower, upper = math.log(delta), 0.5 * math.log(delta)
        counts = [count_downcrossings(np.log(cluster_energy(m.energies, cluster)), lower, upper) for m in ensemble.members]
        profile.append({"delta": float(delta), "meanDowncrossings": float(np.mean(counts)) if counts else 0.0})
    return profile


# -- conservation and micro/meso comparison ----------------------------------


def test_energy_conservation(record: TrajectoryRecord, tolerance: float = 1e-12) -> HypothesisReport:
    """Whole-run drift of the total and, when recorded, the worst single accepted step."""
    totals = record.energies.sum(axis=1)
    deviation = float(np.max(np.abs(totals - totals[0])) / totals[0])
    step = record.metadata.get("maxStepImbalance")
    worst = max(deviation, float(step)) if step is not None else deviation
    return HypothesisReport(
        name="energy-conservation",
        statistic=worst,
        passed=worst <= tolerance,
        sample_sizes={"samples": int(totals.size)},
        details={"tolerance": tolerance, "totalDrift": deviation, "maxStepImbalance": step},
    )


def ks_noise_floor(n: int, m: int, alpha: float = 0.05) -> float:
    """Two-sample KS critical distance at level ``alpha``."""
    return math.sqrt(-0.5 * math.log(alpha / 2.0)) * math.sqrt((n + m) / (n * m))


def compare_micro_sde(micro: EnsembleRecord, sde: EnsembleRecord, *, alpha: float = 0.05) -> HypothesisReport:
    """Per-site KS distance between the final energy marginals of two ensembles."""
    if not micro.members or not sde.members:
        raise VerificationError("both ensembles need members")
    if micro.members[0].n_vertices != sde.members[0].n_vertices:
        raise VerificationError("ensembles live on graphs of different sizes")
    t_micro = micro.members[0].times[-1]
    t_sde = sde.members[0].times[-1]
    if abs(t_micro - t_sde) > 1e-6 * max(1.0, abs(t_sde)):
        raise VerificationError(f"ensembles end at different times ({t_micro:g} vs {t_sde:g})")
    if not np.allclose(micro.members[0].energies[0], sde.members[0].energies[0], rtol=1e-12):
        raise VerificationError("ensembles start from different energies")
    final_micro = micro.final_energies()
    final_sde = sde.final_energies()
    distances, p_values = [], []
    for site in range(final_micro.shape[1]):
        outcome = stats.ks_2samp(final_micro[:, site], final_sde[:, site])
        distances.append(float(outcome.statistic))
        p_values.append(float(outcome.pvalue))
    floor = ks_noise_floor(final_micro.shape[0], final_sde.shape[0], alpha)
    totals_micro = final_micro.sum(axis=1)
    totals_sde = final_sde.sum(axis=1)
    return HypothesisReport(
        name="micro-vs-sde",
        statistic=max(distances),
        p_value=min(p_values),
        level=alpha,
        passed=max(distances) <= floor,
        gated=False,
        sample_sizes={"micro": int(final_micro.shape[0]), "sde": int(final_sde.shape[0])},
        details={
            "distances": distances,
            "noiseFloor": floor,
            "time": float(t_sde),
            "microTotalSpread": float(np.max(np.abs(totals_micro - totals_micro[0]))),
            "sdeTotalSpread": float(np.max(np.abs(totals_sde - totals_sde[0]))),
        },
    )


def compare_ladder(epsilons: Sequence[float], reports: Sequence[HypothesisReport]) -> HypothesisReport:
    """KS distance must shrink along a decreasing epsilon ladder and end inside the noise floor."""
    order = np.argsort(epsilons)[::-1]
    distances = [reports[i].statistic for i in order]
    decreasing = all(b < a for a, b in zip(distances, distances[1:]))
    final = reports[order[-1]]
    return HypothesisReport(
        name="micro-sde-ladder",
        statistic=distances[-1],
        passed=decreasing and final.statistic <= final.details["noiseFloor"],
        sample_sizes=final.sample_sizes,
        details={"epsilons": [float(epsilons[i]) for i in order], "distances": distances},
    )


# -- map testbed -------------------------------------------------------------


def test_sigma_against_oracle(estimate: greenkubo.CorrelationEstimate, oracle: greenkubo.CorrelationEstimate, tolerance: float = 0.1) -> HypothesisReport:
    gap = abs(estimate.value - oracle.value) / abs(oracle.value) if oracle.value else float("inf")
    return HypothesisReport(
        name="sigma-vs-oracle",
        statistic=gap,
        passed=gap <= tolerance,
        sample_sizes={"lagSum": estimate.ensemble, "oracle": oracle.ensemble},
        details={"lagSum": estimate.model_dump(), "oracle": oracle.model_dump(), "tolerance": tolerance},
    )


def test_zero_sigma(estimate: greenkubo.CorrelationEstimate, z: float = 2.0, name: str = "coboundary-sigma") -> HypothesisReport:
    return HypothesisReport(
        name=name,
        statistic=estimate.value,
        ci=(estimate.value - z * estimate.stderr, estimate.value + z * estimate.stderr),
        passed=abs(estimate.value) <= z * estimate.stderr + 1e-12,
        sample_sizes={"ensemble": estimate.ensemble},
        details=estimate.model_dump(),
    )


def identity_report(report: coeffs.IdentityReport) -> HypothesisReport:
    return HypothesisReport(
        name=report.name,
        statistic=report.max_residual,
        passed=report.passed,
        sample_sizes={"points": report.points},
        details={"tolerance": report.tolerance},
    )


def drift_inequality_report(report: coeffs.DriftInequalityReport) -> HypothesisReport:
    return HypothesisReport(
        name="drift-inequality",
        statistic=report.min_margin,
        passed=report.passed,
        sample_sizes={"points": report.points, "excluded": report.excluded},
        details=report.model_dump(),
    )


# -- suite -------------------------------------------------------------------


FAST_CHECKS = (
    "coefficients",
    "conservation",
    "drift-identity",
    "invariant",
    "reversibility",
    "unreachability",
    "small-site",
    "sigma-map",
    "downcrossings",
)
SLOW_CHECKS = ("micro-gauges", "gamma-curve", "micro-sde")
DRIFT_RATIO = 2.5


def _selected(config: LabConfig) -> list[str]:
    known = FAST_CHECKS + SLOW_CHECKS
    if config.verify.checks is not None:
        unknown = sorted(set(config.verify.checks) - set(known))
        if unknown:
            raise VerificationError(f"unknown checks {unknown}; choose from {list(known)}")
        return [name for name in known if name in config.verify.checks]
    return list(FAST_CHECKS) + (list(SLOW_CHECKS) if config.verify.slow else [])


class _SuiteContext:
    """Shared objects for the checks of one suite run."""

    def __init__(self, config: LabConfig, workers: int):
        self.config = config
        self.workers = workers
        self.seed = config.seed
        self.model = build_model(config.coefficients)
        self.analytic = self.model if self.model.is_analytic else CoefficientModel.analytic(config.coefficients.A, config.coefficients.d)
        self.gamma_curve: greenkubo.GammaCurve | None = None

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi, n = self.config.verify.drift_grid
        return coeffs.pair_grid(lo, hi, int(n))


def _check_coefficients(ctx: _SuiteContext) -> list[HypothesisReport]:
    grid = ctx.grid()
    reports = [
        identity_report(coeffs.check_homogeneity(ctx.analytic, grid=grid)),
        identity_report(coeffs.check_euler_relation(ctx.analytic, grid=grid)),
        *(identity_report(r) for r in coeffs.check_symmetries(ctx.analytic, grid=grid)),
        identity_report(coeffs.check_gamma_reciprocity(ctx.analytic)),
    ]
    if ctx.analytic.d >= 3:
        M = max(DRIFT_RATIO, coeffs.drift_log_threshold(ctx.analytic))
        pairs = [(s, t) for s, t in zip(*grid) if t >= DRIFT_RATIO * s]
        reports.append(drift_inequality_report(coeffs.check_drift_inequality(ctx.analytic, M, pairs)))
    return reports


def _check_conservation(ctx: _SuiteContext) -> list[HypothesisReport]:
    record = simulate(sde_run_config(ctx.config, model=ctx.model))
    return [test_energy_conservation(record)]


def _check_drift_identity(ctx: _SuiteContext) -> list[HypothesisReport]:
    return [test_drift_identity(ctx.analytic, ctx.grid(), step=ctx.config.verify.fd_step)]


def _two_sites() -> InteractionGraph:
    return build_complete_graph(2)


def _check_invariant(ctx: _SuiteContext) -> list[HypothesisReport]:
    v = ctx.config.verify
    marginal = test_invariant_marginal(
        ctx.model,
        _two_sites(),
        v.beta,
        members=v.invariant_members,
        t_run=v.invariant_t,
        dt=v.invariant_dt,
        stride=v.invariant_stride,
        seed=ctx.seed,
        level=v.level,
        min_ess=v.min_ess,
        workers=ctx.workers,
    )
    calibration = calibrate_ks(v.calibration_n, v.calibration_repetitions, v.level, ctx.seed, d=ctx.model.d, beta=v.beta)
    return [marginal, calibration]


def _check_reversibility(ctx: _SuiteContext) -> list[HypothesisReport]:
    v = ctx.config.verify
    graph = _two_sites()
    return [
        test_reversibility(ctx.model, graph, v.beta, (phi, h), samples=v.reversibility_samples, seed=ctx.seed, name=f"reversibility-{name}")
        for name, phi, h in REVERSIBILITY_CATALOG
    ]


def _check_unreachability(ctx: _SuiteContext) -> list[HypothesisReport]:
    v = ctx.config.verify
    table = estimate_hitting_probability(
        ctx.analytic,
        build_chain(len(v.hitting_energies)),
        v.hitting_energies,
        v.hitting_t,
        v.hitting_deltas,
        v.hitting_ensemble,
        ctx.seed,
        dt=v.hitting_dt,
        confidence=v.confidence,
        workers=ctx.workers,
    )
    return [test_unreachability_trend(table)]


def _check_small_site(ctx: _SuiteContext) -> list[HypothesisReport]:
    v = ctx.config.verify
    return [
        test_small_site_drift(
            ctx.analytic,
            build_chain(len(v.small_site_energies)),
            v.small_site_energies,
            dt=v.small_site_dt,
            steps=v.small_site_steps,
            ensemble=v.small_site_ensemble,
            seed=ctx.seed,
            level=v.level,
        )
    ]


def _check_sigma_map(ctx: _SuiteContext) -> list[HypothesisReport]:
    gk = ctx.config.greenkubo
    fast_map = CatMapTorus()
    observable = TORUS_OBSERVABLES[gk.observable]
    estimate = greenkubo.estimate_sigma_sq_map(fast_map, observable, gk.lag_max, gk.sigma_ensemble, ctx.seed)
    oracle = greenkubo.birkhoff_variance_oracle(fast_map, observable, gk.oracle_steps, gk.oracle_ensemble, ctx.seed)
    coboundary = greenkubo.estimate_sigma_sq_map(fast_map, TORUS_OBSERVABLES["coboundary"], gk.lag_max, gk.sigma_ensemble, ctx.seed)
    return [test_sigma_against_oracle(estimate, oracle), test_zero_sigma(coboundary)]


def _check_downcrossings(ctx: _SuiteContext) -> list[HypothesisReport]:
    v = ctx.config.verify
    config = SdeRunConfig(
        graph=build_chain(len(v.hitting_energies)),
        model=ctx.analytic,
        initial_energies=tuple(v.hitting_energies),
        t_end=v.hitting_t,
        dt=v.hitting_dt,
        seed=ctx.seed,
    )
    ensemble = simulate_ensemble(config, min(v.hitting_ensemble, 200), workers=ctx.workers)
    deltas = [delta for delta in v.hitting_deltas if delta < 1]
    profile = downcrossing_profile(ensemble, deltas)
    means = [row["meanDowncrossings"] for row in profile]
    return [
        HypothesisReport(
            name="downcrossing-profile",
            statistic=means[-1] if means else 0.0,
            passed=all(b >= a for a, b in zip(means, means[1:])),
            gated=False,
            sample_sizes={"members": len(ensemble)},
            details={"profile": profile},
        )
    ]


def _check_micro_gauges(ctx: _SuiteContext) -> list[HypothesisReport]:
    base = micro_run_config(ctx.config, graph=_two_sites())
    frozen_config = replace(base, epsilon=0.0, physical_time=1000.0)
    frozen = micro_simulate(frozen_config)
    change = float(np.max(np.abs(frozen.energies - frozen.energies[0])))
    coupled = micro_simulate(base)
    drift = float(coupled.metadata["maxHamiltonianDrift"])
    reversal = check_time_reversal(base)
    return [
        HypothesisReport(name="micro-frozen-energies", statistic=change, passed=change <= FROZEN_TOLERANCE, details={"physicalTime": 1000.0}),
        HypothesisReport(name="micro-conserved-energy", statistic=drift, passed=drift <= DRIFT_WARNING, details={"epsilon": base.epsilon}),
        HypothesisReport(
            name="micro-time-reversal",
            statistic=reversal.log_energy_error,
            passed=reversal.log_energy_error <= 1e-6,
            details={"positionError": reversal.position_error, "velocityError": reversal.velocity_error},
        ),
    ]


def _gamma_curve(ctx: _SuiteContext) -> greenkubo.GammaCurve:
    if ctx.gamma_curve is None:
        gk = ctx.config.greenkubo
        micro = ctx.config.micro
        ctx.gamma_curve = greenkubo.estimate_gamma_curve(
            make_backend("hyperbolic"),
            make_potential(micro.potential, micro.bump_radius),
            coeffs.log_grid(gk.tau_min, gk.tau_max, gk.tau_points),
            ensemble=gk.ensemble,
            seed=ctx.seed,
            horizon=gk.horizon,
            resolution=gk.resolution,
            max_points=gk.max_points,
            workers=ctx.workers,
            tail_from=gk.tail_from,
        )
    return ctx.gamma_curve


def _check_gamma_curve(ctx: _SuiteContext) -> list[HypothesisReport]:
    gk = ctx.config.greenkubo
    curve = _gamma_curve(ctx)
    surface = make_backend("hyperbolic")
    potential = make_potential(ctx.config.micro.potential, ctx.config.micro.bump_radius)
    pairs = greenkubo.sample_pairs(surface, gk.ensemble, ctx.seed)
    options = {"pairs": pairs, "horizon": gk.horizon, "resolution": gk.resolution, "max_points": gk.max_points}
    unit = greenkubo.estimate_rho(surface, potential, 1.0, 1.0, **options)
    doubled = greenkubo.estimate_rho(surface, potential, 2.0, 2.0, **options)
    gap = unit.value - 2.0 * doubled.value
    joint = math.hypot(unit.stderr, 2.0 * doubled.stderr)
    residual = curve.fit.relative_residual if curve.fit is not None else float("inf")
    return [
        HypothesisReport(
            name="gamma-positivity",
            statistic=float(np.min(curve.gammas)),
            passed=not curve.nonpositive,
            sample_sizes={"ensemble": gk.ensemble, "taus": int(curve.taus.size)},
            details=curve.report(),
        ),
        HypothesisReport(name="gamma-tail", statistic=residual, passed=residual < 0.2, details={"fit": curve.fit.model_dump() if curve.fit else None}),
        HypothesisReport(
            name="gamma-homogeneity",
            statistic=gap,
            ci=(gap - 2.0 * joint, gap + 2.0 * joint),
            passed=abs(gap) <= 2.0 * joint,
            sample_sizes={"ensemble": gk.ensemble},
            details={"rho11": unit.model_dump(), "rho22": doubled.model_dump()},
        ),
    ]


def _check_micro_sde(ctx: _SuiteContext) -> list[HypothesisReport]:
    micro = ctx.config.micro
    graph = _two_sites()
    model = _gamma_curve(ctx).as_model(d=2)
    sde = comparison_sde_config(ctx.config, graph=graph, model=model)
    sde_ensemble = simulate_ensemble(sde, micro.ensemble, workers=ctx.workers, record=False)
    reports = []
    for epsilon in micro.epsilon_ladder:
        config = micro_run_config(ctx.config, epsilon=epsilon, graph=graph)
        ensemble = micro_ensemble(config, micro.ensemble, batch_size=micro.batch_size, workers=ctx.workers)
        report = compare_micro_sde(ensemble, sde_ensemble)
        report.name = f"micro-vs-sde-eps-{epsilon:g}"
        reports.append(report)
    return [*reports, compare_ladder(micro.epsilon_ladder, reports)]


CHECKS = {
    "coefficients": _check_coefficients,
    "conservation": _check_conservation,
    "drift-identity": _check_drift_identity,
    "invariant": _check_invariant,
    "reversibility": _check_reversibility,
    "unreachability": _check_unreachability,
    "small-site": _check_small_site,
    "sigma-map": _check_sigma_map,
    "downcrossings": _check_downcrossings,
    "micro-gauges": _check_micro_gauges,
    "gamma-curve": _check_gamma_curve,
    "micro-sde": _check_micro_sde,
}


def run_suite(config: LabConfig, *, workers: int = 1, output_dir: Path | None = None) -> SuiteReport:
    """Run the selected checks; reports are written when ``output_dir`` is given."""
    digest = config_digest(config)
    ctx = _SuiteContext(config, workers)
    suite = SuiteReport(seed=config.seed, config_digest=digest)
    for name in _selected(config):
        logger.info("running check %s", name)
        for report in CHECKS[name](ctx):
            suite.reports.append(_stamp(report, config.seed, digest))
            logger.info("%s: statistic=%.6g passed=%s", report.name, report.statistic, report.passed)
    if output_dir is not None:
        suite.write(output_dir)
    if not suite.passed:
        logger.warning("verification failed: %s", ", ".join(suite.failures()))
    return suite
