"""Green-Kubo estimators for the coupling correlations.

``C(t) = E[L_1 V(g^{at} xi, g^{bt} eta) L_1 V(xi, eta)]`` is averaged over
pairs of Liouville-distributed frames. ``rho(a, b)`` is twice its integral
over ``[0, inf)``: the integrand is even in ``t`` by time reversal. The
integral is truncated at the first time where ``|C|`` stays below three
standard errors for five consecutive grid points, and the remainder is
extrapolated from an exponential fit of ``|C|`` before that point.

Standard errors are computed from per-member integrals, so the error of
the integral accounts for the correlation between grid points.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from pydantic import BaseModel
from scipy.integrate import trapezoid

from app.errors import CorrelationError
from app.lab import coeffs
from app.lab.coeffs import CoefficientModel, GammaTailFit
from app.lab.micro.backends import CatMapTorus, HyperbolicSurface, coupling_current
from app.lab.rng import make_rng
from app.lab.topology import InteractionGraph

logger = logging.getLogger(__name__)

PAIR_STREAM = "greenkubo-pairs"
SIGMA_STREAM = "sigma-map"
ORACLE_STREAM = "birkhoff-oracle"
SIGNIFICANCE = 3.0
QUIET_RUN = 5


class CorrelationEstimate(BaseModel):
    value: float
    stderr: float
    window: float
    ensemble: int
    tail: float = 0.0
    decay_rate: float | None = None
    # False when ``tail`` is only a bound on the truncated remainder
    tail_in_value: bool = True


@dataclass
class CorrelationCurve:
    """Sampled ``C(t)``; ``products`` holds the per-member integrands."""

    times: np.ndarray
    products: np.ndarray
    a: float
    b: float
    negative: np.ndarray | None = None

    @property
    def mean(self) -> np.ndarray:
        return self.products.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        return self.products.std(axis=0, ddof=1) / math.sqrt(self.products.shape[0])

    @property
    def ensemble(self) -> int:
        return int(self.products.shape[0])


def time_grid(a: float, b: float, horizon: float = 12.0, resolution: float = 0.05, max_points: int = 4001) -> np.ndarray:
    """Uniform grid reaching ``horizon / a`` with spacing ``resolution / max(a, b)``."""
    if not (a > 0 and b > 0):
        raise ValueError("flow speeds must be positive")
    t_max = horizon / a
    points = min(max_points, int(math.ceil(t_max * max(a, b) / resolution)) + 1)
    return np.linspace(0.0, t_max, max(points, QUIET_RUN + 2))


def sample_pairs(surface: HyperbolicSurface, ensemble: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Independent frames ``(xi, eta)``; shared across speeds for common random numbers."""
    rng = make_rng(seed, PAIR_STREAM, 0)
    return surface.sample_uniform(rng, ensemble), surface.sample_uniform(rng, ensemble)


def _sweep(surface, potential, xi, eta, a: float, b: float, t_grid: np.ndarray, sign: float) -> np.ndarray:
    start = coupling_current(surface, xi, eta, potential)
    out = np.empty((xi.shape[0], t_grid.size))
    out[:, 0] = start * start
    x, y = xi, eta
    for k in range(1, t_grid.size):
        dt = sign * (t_grid[k] - t_grid[k - 1])
        x = surface.advance(x, a * dt)
        y = surface.advance(y, b * dt)
        out[:, k] = coupling_current(surface, x, y, potential) * start
    return out


def estimate_pair_correlation(
    surface: HyperbolicSurface,
    potential,
    a: float,
    b: float,
    t_grid: Sequence[float] | None = None,
    ensemble: int = 1000,
    seed: int = 0,
    *,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
    diagnostic: bool = False,
) -> CorrelationCurve:
    """Monte Carlo ``C(t)`` on ``t_grid`` (nonnegative, starting at 0).

    With ``diagnostic`` the flow is also run backwards so that ``C(-t)`` can
    be compared against ``C(t)``.
    """
    if not (a > 0 and b > 0):
        raise ValueError("flow speeds must be positive")
    times = time_grid(a, b) if t_grid is None else np.asarray(t_grid, dtype=float)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ValueError("t_grid must start at 0 and increase")
    xi, eta = pairs if pairs is not None else sample_pairs(surface, ensemble, seed)
    forward = _sweep(surface, potential, xi, eta, a, b, times, 1.0)
    backward = _sweep(surface, potential, xi, eta, a, b, times, -1.0) if diagnostic else None
    return CorrelationCurve(times=times, products=forward, a=float(a), b=float(b), negative=backward)


def correlation_window(mean: np.ndarray, stderr: np.ndarray) -> int | None:
    """Index where ``|C| <= 3 SE`` begins to hold for five consecutive points."""
    quiet = np.abs(mean) <= SIGNIFICANCE * stderr
    run = 0
    for i, flag in enumerate(quiet):
        run = run + 1 if flag else 0
        if run == QUIET_RUN:
            return i - QUIET_RUN + 1
    return None


def fit_decay_rate(times: np.ndarray, mean: np.ndarray, stderr: np.ndarray) -> float | None:
    """Exponential rate from a least-squares line through ``ln |C|`` at significant points."""
    significant = np.abs(mean) > SIGNIFICANCE * stderr
    if significant.sum() < 2:
        return None
    slope, _ = np.polyfit(times[significant], np.log(np.abs(mean[significant])), 1)
    return float(-slope)


def integrate_curve(curve: CorrelationCurve, products: np.ndarray | None = None) -> CorrelationEstimate:
    """``2 * int_0^W C dt`` plus the exponential tail beyond ``W``."""
    products = curve.products if products is None else products
    times = curve.times
    mean = products.mean(axis=0)
    stderr = products.std(axis=0, ddof=1) / math.sqrt(products.shape[0])
    end = correlation_window(mean, stderr)
    if end is None:
        end = times.size - 1
        logger.warning("correlation did not settle within t = %.4g; integrating the whole grid", times[-1])
    rate = fit_decay_rate(times[: end + 1], mean[: end + 1], stderr[: end + 1])
    if end > 0 and (rate is None or rate <= 0):
        raise CorrelationError(f"correlation at speeds ({curve.a:g}, {curve.b:g}) shows no exponential decay")
    per_member = 2.0 * trapezoid(products[:, : end + 1], times[: end + 1], axis=1) if end > 0 else np.zeros(products.shape[0])
    tail = 2.0 * mean[end] / rate if end > 0 and rate else 0.0
    return CorrelationEstimate(
        value=float(per_member.mean() + tail),
        stderr=float(per_member.std(ddof=1) / math.sqrt(per_member.size)),
        window=float(times[end]),
        ensemble=int(products.shape[0]),
        tail=float(tail),
        decay_rate=rate,
    )


def estimate_rho(
    surface: HyperbolicSurface,
    potential,
    a: float,
    b: float,
    *,
    ensemble: int = 1000,
    seed: int = 0,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
    horizon: float = 12.0,
    resolution: float = 0.05,
    max_points: int = 4001,
) -> CorrelationEstimate:
    times = time_grid(a, b, horizon, resolution, max_points)
    curve = estimate_pair_correlation(surface, potential, a, b, times, ensemble, seed, pairs=pairs)
    return integrate_curve(curve)


class HalfIntegralReport(BaseModel):
    positive: float
    negative: float
    joint_stderr: float
    window: float
    passed: bool


def check_time_reversal_halves(curve: CorrelationCurve, z: float = 2.0) -> HalfIntegralReport:
    """Compare ``int_0^W C(t) dt`` with ``int_0^W C(-t) dt`` on the same members."""
    if curve.negative is None:
        raise ValueError("curve was estimated without the backward diagnostic")
    window = correlation_window(curve.mean, curve.stderr)
    end = curve.times.size - 1 if window is None else max(window, 1)
    span = curve.times[: end + 1]
    plus = trapezoid(curve.products[:, : end + 1], span, axis=1)
    minus = trapezoid(curve.negative[:, : end + 1], span, axis=1)
    joint = float((plus - minus).std(ddof=1) / math.sqrt(plus.size))
    gap = abs(float(plus.mean() - minus.mean()))
    return HalfIntegralReport(
        positive=float(plus.mean()),
        negative=float(minus.mean()),
        joint_stderr=joint,
        window=float(span[-1]),
        passed=gap <= z * joint + 1e-12,
    )


@dataclass
class GammaCurve:
    taus: np.ndarray
    estimates: list[CorrelationEstimate]
    fit: GammaTailFit | None = None
    violations: list[int] = field(default_factory=list)
    nonpositive: list[int] = field(default_factory=list)

    @property
    def gammas(self) -> np.ndarray:
        return np.array([e.value for e in self.estimates])

    @property
    def stderr(self) -> np.ndarray:
        return np.array([e.stderr for e in self.estimates])

    def write(self, path: Path, header: Sequence[str] = ()) -> Path:
        return coeffs.write_gamma_table(path, self.taus, self.gammas, self.stderr, header=header)

    def as_model(self, d: int = 3) -> CoefficientModel:
        return CoefficientModel.from_table(self.taus, np.maximum(self.gammas, 0.0), stderr=self.stderr, d=d)

    def report(self) -> dict:
        return {
            "taus": self.taus.tolist(),
            "gammas": self.gammas.tolist(),
            "stderr": self.stderr.tolist(),
            "windows": [e.window for e in self.estimates],
            "decayRates": [e.decay_rate for e in self.estimates],
            "fit": self.fit.model_dump() if self.fit is not None else None,
            "monotonicityViolations": self.violations,
            "nonpositive": self.nonpositive,
        }


def estimate_gamma_curve(
    surface: HyperbolicSurface,
    potential,
    taus: Sequence[float],
    *,
    ensemble: int = 1000,
    seed: int = 0,
    horizon: float = 12.0,
    resolution: float = 0.05,
    max_points: int = 4001,
    workers: int = 1,
    tail_from: float = 8.0,
) -> GammaCurve:
    """``Gamma(tau) = rho(tau, 1)`` on ``taus`` with one shared set of frame pairs."""
    taus = np.asarray(taus, dtype=float)
    if taus.size == 0 or np.any(taus <= 0) or np.any(np.diff(taus) <= 0):
        raise ValueError("tau grid must be positive and increasing")
    pairs = sample_pairs(surface, ensemble, seed)

    def work(tau: float) -> CorrelationEstimate:
        return estimate_rho(surface, potential, tau, 1.0, ensemble=ensemble, pairs=pairs, horizon=horizon, resolution=resolution, max_points=max_points)

    if workers <= 1:
        estimates = [work(t) for t in taus]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            estimates = list(pool.map(work, taus))

    curve = GammaCurve(taus=taus, estimates=estimates)
    values, errors = curve.gammas, curve.stderr
    curve.violations = [i for i in range(1, taus.size) if values[i] > values[i - 1] + 2.0 * math.hypot(errors[i], errors[i - 1])]
    curve.nonpositive = [i for i in range(taus.size) if values[i] + 2.0 * errors[i] <= 0]
    if curve.violations:
        logger.warning("Gamma estimate increases at %d grid points", len(curve.violations))
    if taus.size >= 2:
        curve.fit = coeffs.fit_gamma_tail(taus, values, tail_from=tail_from, stderr=errors)
    return curve


# -- variance matrix -------------------------------------------------------


RhoEstimator = Callable[[float, float], CorrelationEstimate]


def variance_matrix(graph: InteractionGraph, energies: Sequence[float], rho_hat: RhoEstimator) -> tuple[np.ndarray, np.ndarray]:
    """Energy diffusion matrix ``2 beta_xy**2`` assembled from estimated ``rho``.

    Off-diagonal entries are ``-2 beta_xy**2`` on edges and the diagonal
    makes every row sum to zero. Returns the matrix and its standard errors.
    """
    energies = np.asarray(energies, dtype=float)
    n = graph.n_vertices
    matrix = np.zeros((n, n))
    errors = np.zeros((n, n))
    for x, y in graph.edges:
        estimate = rho_hat(math.sqrt(2.0 * energies[x]), math.sqrt(2.0 * energies[y]))
        entry = 2.0 * energies[x] * estimate.value
        error = 2.0 * energies[x] * estimate.stderr
        matrix[x, y] = matrix[y, x] = -entry
        errors[x, y] = errors[y, x] = error
        matrix[x, x] += entry
        matrix[y, y] += entry
        errors[x, x] = math.hypot(errors[x, x], error)
        errors[y, y] = math.hypot(errors[y, y], error)
    return matrix, errors


class VarianceMatrixReport(BaseModel):
    diagonal_ok: bool
    off_diagonal_ok: bool
    row_sums_ok: bool
    max_model_gap: float
    model_ok: bool
    passed: bool


def check_variance_matrix(
    matrix: np.ndarray,
    errors: np.ndarray,
    graph: InteractionGraph,
    energies: Sequence[float],
    model: CoefficientModel,
    z: float = 2.0,
) -> VarianceMatrixReport:
    energies = np.asarray(energies, dtype=float)
    diagonal = np.diag(matrix)
    off = matrix - np.diag(diagonal)
    diagonal_ok = bool(np.all(diagonal >= -z * np.diag(errors)))
    off_ok = bool(np.all(off <= z * (errors - np.diag(np.diag(errors))) + 1e-15))
    rows_ok = bool(np.allclose(matrix.sum(axis=1), 0.0, atol=1e-12 * max(1.0, float(np.abs(matrix).max(initial=0.0)))))
    gap = 0.0
    model_ok = True
    for x, y in graph.edges:
        expected = 2.0 * float(coeffs.beta_sq(model, energies[x], energies[y]))
        difference = abs(-matrix[x, y] - expected)
        gap = max(gap, difference)
        if difference > z * errors[x, y] + 1e-9 * max(1.0, expected):
            model_ok = False
    return VarianceMatrixReport(
        diagonal_ok=diagonal_ok,
        off_diagonal_ok=off_ok,
        row_sums_ok=rows_ok,
        max_model_gap=gap,
        model_ok=model_ok,
        passed=diagonal_ok and off_ok and rows_ok and model_ok,
    )


# -- slow-fast maps --------------------------------------------------------


Observable = Callable[[np.ndarray], np.ndarray]


@dataclass
class LagCurve:
    lags: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    products: np.ndarray

    @property
    def normalised(self) -> np.ndarray:
        return self.mean / self.mean[0] if self.mean[0] != 0 else np.zeros_like(self.mean)


def map_autocorrelation(fast_map: CatMapTorus, observable: Observable, lag_max: int, ensemble: int, seed: int, *, stream: str = SIGMA_STREAM) -> LagCurve:
    """Autocovariances ``E[A(x) A(f^n x)]`` for ``n = 0 .. lag_max``, centred by the sample mean."""
    rng = make_rng(seed, stream, 0)
    points = fast_map.sample_points(rng, ensemble)
    series = np.empty((ensemble, lag_max + 1))
    for n in range(lag_max + 1):
        series[:, n] = observable(points.astype(float) / fast_map.MODULUS)
        points = fast_map.step(points)
    centred = series - series.mean()
    products = centred[:, :1] * centred
    return LagCurve(
        lags=np.arange(lag_max + 1),
        mean=products.mean(axis=0),
        stderr=products.std(axis=0, ddof=1) / math.sqrt(ensemble),
        products=products,
    )


def estimate_sigma_sq_map(fast_map: CatMapTorus, observable: Observable, lag_max: int = 50, ensemble: int = 100_000, seed: int = 0) -> CorrelationEstimate:
    """Two-sided lag sum ``C(0) + 2 sum_{n>=1} C(n)`` truncated adaptively.

    Lags stop at the first run of five insignificant autocovariances. A
    correlation still significant at ``lag_max`` is treated as non-summable.
    ``tail`` bounds the geometric remainder past the window; it is reported
    but not added to ``value``.
    """
    if lag_max < QUIET_RUN or ensemble < 2:
        raise ValueError(f"lag_max must be at least {QUIET_RUN} and the ensemble at least 2")
    curve = map_autocorrelation(fast_map, observable, lag_max, ensemble, seed)
    series_mean = float(np.mean(observable(fast_map.sample_points(make_rng(seed, SIGMA_STREAM, 1), ensemble).astype(float) / fast_map.MODULUS)))
    spread = float(np.sqrt(max(curve.mean[0], 0.0) / ensemble))
    if abs(series_mean) > 4.0 * spread + 1e-12:
        raise CorrelationError(f"observable has mean {series_mean:.3e}; the lag sum needs a centred observable")
    if curve.mean[0] == 0 and np.all(curve.products == 0):
        return CorrelationEstimate(value=0.0, stderr=0.0, window=0.0, ensemble=ensemble, tail=0.0, decay_rate=None, tail_in_value=False)

    start = correlation_window(curve.mean[1:], curve.stderr[1:])
    if start is None:
        raise CorrelationError(f"autocovariance still significant at lag {lag_max}; correlations look non-summable")
    window = start + 1
    weights = np.full(window, 2.0)
    weights[0] = 1.0
    per_member = curve.products[:, :window] @ weights
    rate = fit_decay_rate(curve.lags[1:window].astype(float), curve.mean[1:window], curve.stderr[1:window]) if window > 2 else None
    tail = 0.0
    if rate is not None and rate > 0:
        tail = 2.0 * abs(curve.mean[window - 1]) * math.exp(-rate) / (1.0 - math.exp(-rate))
    return CorrelationEstimate(
        value=float(per_member.mean()),
        stderr=float(per_member.std(ddof=1) / math.sqrt(ensemble)),
        window=float(window),
        ensemble=ensemble,
        tail=float(tail),
        decay_rate=rate,
        tail_in_value=False,
    )


def birkhoff_variance_oracle(fast_map: CatMapTorus, observable: Observable, n_steps: int, ensemble: int, seed: int) -> CorrelationEstimate:
    """``Var(sum_{n<N} A(f^n x)) / N`` over independent orbits."""
    if n_steps < 1 or ensemble < 2:
        raise ValueError("need at least one step and two orbits")
    points = fast_map.sample_points(make_rng(seed, ORACLE_STREAM, 0), ensemble)
    sums = np.zeros(ensemble)
    for _ in range(n_steps):
        sums += observable(points.astype(float) / fast_map.MODULUS)
        points = fast_map.step(points)
    value = float(np.var(sums, ddof=1) / n_steps)
    return CorrelationEstimate(
        value=value,
        stderr=value * math.sqrt(2.0 / (ensemble - 1)),
        window=float(n_steps),
        ensemble=ensemble,
    )
