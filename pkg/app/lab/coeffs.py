"""Correlation functions and the coefficients of the energy SDE.

Everything is built from the single-variable curve ``Gamma(tau) = rho(tau, 1)``:

* ``rho(a, b) = Gamma(a / b) / b`` (homogeneous of degree -1 by construction),
* ``rho_tilde(a, b) = -(a / b) rho(a, b)``,
* ``beta_sq(Ex, Ey) = Ex rho(sqrt(2 Ex), sqrt(2 Ey))``,
* ``drift = (d_Ex - d_Ey) beta_sq + (d - 2)/2 (1/Ex - 1/Ey) beta_sq``,
* ``G = beta_sq / (Ex Ey)``.

The analytic model uses ``Gamma(tau) = A / (1 + tau**3)``; the empirical model
interpolates a tabulated curve. All functions accept scalars or arrays.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from pydantic import BaseModel
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from app.errors import CoefficientError

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
LOG_STEP = 1e-4
DEFAULT_TAU_GRID = (1.0 / 64.0, 64.0, 129)


class CoefficientKind(str, Enum):
    ANALYTIC = "analytic-model"
    EMPIRICAL = "empirical-table"


@dataclass(frozen=True, eq=False)
class GammaTable:
    """Sampled ``Gamma`` curve with a monotone cubic interpolant in ``ln tau``.

    Right tail: ``Gamma(tau_max) (tau_max / tau)**3``. Left tail: ``Gamma(tau_min)``.
    """

    taus: np.ndarray
    gammas: np.ndarray
    stderr: np.ndarray | None = None
    _interp: PchipInterpolator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        taus = np.asarray(self.taus, dtype=float)
        gammas = np.asarray(self.gammas, dtype=float)
        if taus.ndim != 1 or taus.shape != gammas.shape or taus.size < 2:
            raise CoefficientError("gamma table needs matching 1-d tau and gamma arrays with at least 2 points")
        if np.any(taus <= 0) or np.any(np.diff(taus) <= 0):
            raise CoefficientError("gamma table tau grid must be positive and strictly increasing")
        if np.any(gammas < 0) or not np.all(np.isfinite(gammas)):
            raise CoefficientError("gamma table values must be finite and nonnegative")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "gammas", gammas)
        if self.stderr is not None:
            object.__setattr__(self, "stderr", np.asarray(self.stderr, dtype=float))
        object.__setattr__(self, "_interp", PchipInterpolator(np.log(taus), gammas, extrapolate=False))

    @property
    def tau_min(self) -> float:
        return float(self.taus[0])

    @property
    def tau_max(self) -> float:
        return float(self.taus[-1])

    def value(self, tau: np.ndarray) -> np.ndarray:
        shape = np.shape(tau)
        tau = np.asarray(tau, dtype=float).ravel()
        out = np.empty_like(tau)
        left = tau <= self.tau_min
        right = tau >= self.tau_max
        inner = ~(left | right)
        out[left] = self.gammas[0]
        out[right] = self.gammas[-1] * (self.tau_max / tau[right]) ** 3
        out[inner] = self._interp(np.log(tau[inner]))
        return out.reshape(shape)

    def derivative(self, tau: np.ndarray) -> np.ndarray:
        shape = np.shape(tau)
        tau = np.asarray(tau, dtype=float).ravel()
        out = np.zeros_like(tau)
        right = tau >= self.tau_max
        inner = (tau > self.tau_min) & ~right
        out[right] = -3.0 * self.gammas[-1] * self.tau_max**3 / tau[right] ** 4
        out[inner] = self._interp.derivative()(np.log(tau[inner])) / tau[inner]
        return out.reshape(shape)


@dataclass(frozen=True)
class CoefficientModel:
    kind: CoefficientKind = CoefficientKind.ANALYTIC
    A: float = 1.0
    B: float = 0.0
    d: int = 3
    D: float | None = None
    gamma_table: GammaTable | None = None

    def __post_init__(self) -> None:
        if not self.A > 0:
            raise CoefficientError(f"A must be positive, got {self.A}")
        if self.B < 0:
            raise CoefficientError(f"B must be nonnegative, got {self.B}")
        if int(self.d) != self.d or self.d < 2:
            raise CoefficientError(f"d must be an integer >= 2, got {self.d}")
        if self.kind is CoefficientKind.EMPIRICAL and self.gamma_table is None:
            raise CoefficientError("empirical coefficient model needs a gamma table")

    @classmethod
    def analytic(cls, A: float = 1.0, d: int = 3) -> "CoefficientModel":
        return cls(kind=CoefficientKind.ANALYTIC, A=A, B=0.0, d=d, D=0.0)

    @classmethod
    def from_table(
        cls,
        taus: Sequence[float],
        gammas: Sequence[float],
        *,
        stderr: Sequence[float] | None = None,
        d: int = 3,
        A: float | None = None,
    ) -> "CoefficientModel":
        table = GammaTable(np.asarray(taus), np.asarray(gammas), None if stderr is None else np.asarray(stderr))
        fit = fit_gamma_tail(table.taus, table.gammas)
        amplitude = A if A is not None else table.gammas[-1] * table.tau_max**3
        return cls(kind=CoefficientKind.EMPIRICAL, A=float(amplitude), B=fit.B, d=d, D=fit.D, gamma_table=table)

    def with_dimension(self, d: int) -> "CoefficientModel":
        return CoefficientModel(kind=self.kind, A=self.A, B=self.B, d=d, D=self.D, gamma_table=self.gamma_table)

    @property
    def is_analytic(self) -> bool:
        return self.kind is CoefficientKind.ANALYTIC


def _ret(value: np.ndarray):
    return value.item() if np.ndim(value) == 0 else value


def _positive(name: str, *values) -> list[np.ndarray]:
    arrays = [np.asarray(v, dtype=float) for v in values]
    for array in arrays:
        if np.any(~(array > 0)):
            raise CoefficientError(f"{name} requires strictly positive arguments")
    return arrays


def gamma(model: CoefficientModel, tau) -> float | np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if np.any(~(tau >= 0)):
        raise CoefficientError("gamma is defined for tau >= 0 only")
    if model.is_analytic:
        return _ret(model.A / (1.0 + tau**3))
    return _ret(model.gamma_table.value(tau))


def gamma_derivative(model: CoefficientModel, tau) -> float | np.ndarray:
    tau = np.asarray(tau, dtype=float)
    if np.any(~(tau >= 0)):
        raise CoefficientError("gamma is defined for tau >= 0 only")
    if model.is_analytic:
        return _ret(-3.0 * model.A * tau**2 / (1.0 + tau**3) ** 2)
    return _ret(model.gamma_table.derivative(tau))


def rho(model: CoefficientModel, a, b) -> float | np.ndarray:
    a, b = _positive("rho", a, b)
    return _ret(np.asarray(gamma(model, a / b)) / b)


def rho_tilde(model: CoefficientModel, a, b) -> float | np.ndarray:
    a, b = _positive("rho_tilde", a, b)
    return _ret(-(a / b) * np.asarray(rho(model, a, b)))


def rho_partials(model: CoefficientModel, a, b) -> tuple[np.ndarray, np.ndarray]:
    """``(d rho / da, d rho / db)`` through the chain rule on ``Gamma``."""
    a, b = _positive("rho_partials", a, b)
    tau = a / b
    g = np.asarray(gamma(model, tau))
    dg = np.asarray(gamma_derivative(model, tau))
    return _ret(dg / b**2), _ret(-g / b**2 - a * dg / b**3)


def _beta_sq_oriented(model: CoefficientModel, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    return s * np.asarray(rho(model, np.sqrt(2.0 * s), np.sqrt(2.0 * t)))


def beta_sq(model: CoefficientModel, Ex, Ey) -> float | np.ndarray:
    """``Ex * rho(sqrt(2 Ex), sqrt(2 Ey))``, symmetric in its arguments.

    The analytic model evaluates the algebraically equal form
    ``A Ex Ey / (sqrt(2) (Ex**1.5 + Ey**1.5))``, which is symmetric in floating
    point. Empirical tables satisfy the symmetry only up to interpolation
    error, so the two orientations are averaged.
    """
    s, t = _positive("beta_sq", Ex, Ey)
    if model.is_analytic:
        return _ret(model.A * (s * t) / (SQRT2 * (s**1.5 + t**1.5)))
    return _ret(0.5 * (_beta_sq_oriented(model, s, t) + _beta_sq_oriented(model, t, s)))


def beta_sq_partials(model: CoefficientModel, Ex, Ey) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of ``beta_sq`` in ``Ex`` and ``Ey``.

    Analytic model: chain rule through ``Gamma`` and ``Gamma'``. Empirical
    model: central differences in ``ln E`` with step ``1e-4``.
    """
    s, t = _positive("beta_sq_partials", Ex, Ey)
    if model.is_analytic:
        r = np.sqrt(s / t)
        g = np.asarray(gamma(model, r))
        dg = np.asarray(gamma_derivative(model, r))
        root = np.sqrt(2.0 * t)
        d_s = (g + 0.5 * r * dg) / root
        d_t = -(s / (2.0 * t * root)) * (g + r * dg)
        return _ret(d_s), _ret(d_t)
    up, down = np.exp(LOG_STEP), np.exp(-LOG_STEP)
    d_s = (np.asarray(beta_sq(model, s * up, t)) - np.asarray(beta_sq(model, s * down, t))) / (s * (up - down))
    d_t = (np.asarray(beta_sq(model, s, t * up)) - np.asarray(beta_sq(model, s, t * down))) / (t * (up - down))
    return _ret(d_s), _ret(d_t)


def _drift_oriented(model: CoefficientModel, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    d_s, d_t = (np.asarray(v) for v in beta_sq_partials(model, s, t))
    b2 = np.asarray(beta_sq(model, s, t))
    return d_s - d_t + 0.5 * (model.d - 2) * (1.0 / s - 1.0 / t) * b2


def drift(model: CoefficientModel, Ex, Ey) -> float | np.ndarray:
    """Per-edge drift, antisymmetric in floating point.

    The oriented expression is antisymmetrised, which leaves its exact value
    unchanged and makes ``drift(E, E) == 0`` hold bit for bit.
    """
    s, t = _positive("drift", Ex, Ey)
    return _ret(0.5 * (_drift_oriented(model, s, t) - _drift_oriented(model, t, s)))


def G_factor(model: CoefficientModel, Ex, Ey) -> float | np.ndarray:
    s, t = _positive("G_factor", Ex, Ey)
    return _ret(np.asarray(beta_sq(model, s, t)) / (s * t))


# -- reports ---------------------------------------------------------------


class DriftInequalityReport(BaseModel):
    M: float
    M_required: float
    d: int
    points: int
    excluded: int
    min_margin: float
    argmin: tuple[float, float] | None = None
    passed: bool


class IdentityReport(BaseModel):
    name: str
    max_residual: float
    tolerance: float
    points: int
    passed: bool


class GammaTailFit(BaseModel):
    A: float
    A_stderr: float
    relative_residual: float
    B: float
    D: float
    tail_points: int


def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def pair_grid(lo: float = 0.1, hi: float = 10.0, n: int = 20) -> tuple[np.ndarray, np.ndarray]:
    values = log_grid(lo, hi, n)
    a, b = np.meshgrid(values, values, indexing="ij")
    return a.ravel(), b.ravel()


def drift_log_threshold(model: CoefficientModel) -> float:
    """Minimal admissible ``M`` for the drift lower bound: ``max{1, (d-1+8B/A)/(d-2)}``."""
    if model.d <= 2:
        raise CoefficientError("the drift lower bound is only claimed for d >= 3")
    return max(1.0, (model.d - 1 + 8.0 * model.B / model.A) / (model.d - 2))


def drift_margin(model: CoefficientModel, Ex, Ey) -> float | np.ndarray:
    """``drift(Ex, Ey) * Ex - beta_sq(Ex, Ey)``."""
    s, t = _positive("drift_margin", Ex, Ey)
    return _ret(np.asarray(drift(model, s, t)) * s - np.asarray(beta_sq(model, s, t)))


def check_drift_inequality(
    model: CoefficientModel,
    M: float,
    grid: Iterable[tuple[float, float]],
    *,
    tolerance: float = 1e-12,
) -> DriftInequalityReport:
    required = drift_log_threshold(model)
    if M < required:
        raise CoefficientError(f"M={M} is below the admissible threshold {required:.6g} for d={model.d}")
    pairs = np.asarray(list(grid), dtype=float).reshape(-1, 2)
    mask = pairs[:, 1] > M * pairs[:, 0]
    kept = pairs[mask]
    if kept.size == 0:
        return DriftInequalityReport(
            M=M, M_required=required, d=model.d, points=0, excluded=int((~mask).sum()),
            min_margin=float("inf"), passed=True,
        )
    margins = np.asarray(drift_margin(model, kept[:, 0], kept[:, 1]))
    worst = int(np.argmin(margins))
    return DriftInequalityReport(
        M=M,
        M_required=required,
        d=model.d,
        points=int(kept.shape[0]),
        excluded=int((~mask).sum()),
        min_margin=float(margins[worst]),
        argmin=(float(kept[worst, 0]), float(kept[worst, 1])),
        passed=bool(margins[worst] >= -tolerance),
    )


def critical_drift_ratio(model: CoefficientModel, Ey: float = 1.0, samples: int = 2000) -> float:
    """Smallest ``M`` such that the drift lower bound holds whenever ``Ey > M Ex``.

    Scans ``q = Ex / Ey`` on ``(0, 1)`` for the first sign change of the margin
    and refines it with Brent's method. For the analytic model the margin has
    the sign of a function of ``q`` alone, so ``Ey`` is immaterial there.
    """
    if model.d <= 2:
        raise CoefficientError("the drift lower bound is only claimed for d >= 3")
    qs = np.geomspace(1e-8, 1.0 - 1e-9, samples)
    margins = np.asarray(drift_margin(model, qs * Ey, np.full_like(qs, Ey)))
    negative = np.nonzero(margins < 0)[0]
    if negative.size == 0:
        return 1.0
    first = int(negative[0])
    if first == 0:
        return float("inf")
    q_star = brentq(lambda q: float(drift_margin(model, q * Ey, Ey)), qs[first - 1], qs[first], xtol=1e-14)
    return 1.0 / q_star


def check_homogeneity(
    model: CoefficientModel,
    lambdas: Sequence[float] = (0.5, 2.0, 10.0),
    grid: tuple[np.ndarray, np.ndarray] | None = None,
    tolerance: float = 1e-12,
) -> IdentityReport:
    a, b = grid if grid is not None else pair_grid()
    base = np.asarray(rho(model, a, b))
    worst = 0.0
    for lam in lambdas:
        scaled = lam * np.asarray(rho(model, lam * a, lam * b))
        worst = max(worst, float(np.max(np.abs(scaled - base) / base)))
    return IdentityReport(
        name="homogeneity", max_residual=worst, tolerance=tolerance,
        points=a.size * len(lambdas), passed=worst <= tolerance,
    )


def check_euler_relation(
    model: CoefficientModel,
    grid: tuple[np.ndarray, np.ndarray] | None = None,
    rel_step: float = 1e-6,
    tolerance: float = 1e-4,
) -> IdentityReport:
    """``a d_a rho + b d_b rho = -rho`` with derivatives by central differences."""
    a, b = grid if grid is not None else pair_grid()
    ha, hb = rel_step * a, rel_step * b
    d_a = (np.asarray(rho(model, a + ha, b)) - np.asarray(rho(model, a - ha, b))) / (2 * ha)
    d_b = (np.asarray(rho(model, a, b + hb)) - np.asarray(rho(model, a, b - hb))) / (2 * hb)
    value = np.asarray(rho(model, a, b))
    residual = np.abs(a * d_a + b * d_b + value) / value
    worst = float(np.max(residual))
    return IdentityReport(name="euler-relation", max_residual=worst, tolerance=tolerance, points=a.size, passed=worst <= tolerance)


def check_symmetries(
    model: CoefficientModel,
    grid: tuple[np.ndarray, np.ndarray] | None = None,
    tolerance: float = 1e-12,
) -> list[IdentityReport]:
    s, t = grid if grid is not None else pair_grid()
    b_st = np.asarray(beta_sq(model, s, t))
    b_ts = np.asarray(beta_sq(model, t, s))
    sym = float(np.max(np.abs(b_st - b_ts) / b_st))
    a_st = np.asarray(drift(model, s, t))
    a_ts = np.asarray(drift(model, t, s))
    anti = float(np.max(np.abs(a_st + a_ts) / np.maximum(np.abs(a_st), np.finfo(float).tiny)))
    return [
        IdentityReport(name="beta-symmetry", max_residual=sym, tolerance=tolerance, points=s.size, passed=sym <= tolerance),
        IdentityReport(name="drift-antisymmetry", max_residual=anti, tolerance=tolerance, points=s.size, passed=anti <= tolerance),
    ]


def check_gamma_reciprocity(model: CoefficientModel, taus: Sequence[float] | None = None, tolerance: float = 1e-12) -> IdentityReport:
    """``Gamma(tau) = tau**-3 Gamma(1/tau)``, the one-variable form of ``a^2 rho(a,b) = b^2 rho(b,a)``."""
    taus = np.asarray(taus if taus is not None else log_grid(1.0 / 64.0, 64.0, 129), dtype=float)
    lhs = np.asarray(gamma(model, taus))
    rhs = np.asarray(gamma(model, 1.0 / taus)) / taus**3
    worst = float(np.max(np.abs(lhs - rhs) / np.maximum(lhs, np.finfo(float).tiny)))
    return IdentityReport(name="gamma-reciprocity", max_residual=worst, tolerance=tolerance, points=taus.size, passed=worst <= tolerance)


def fit_derivative_bound(model: CoefficientModel, grid: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    """Observed ``B'`` in ``|d_a rho(a, b)| <= B' a b^2 / (a^5 + b^5)`` on the grid."""
    a, b = grid if grid is not None else pair_grid(1.0 / 64.0, 64.0, 40)
    d_a = np.abs(np.asarray(rho_partials(model, a, b)[0]))
    shape = a * b**2 / (a**5 + b**5)
    return float(np.max(d_a / shape))


def fit_gamma_tail(taus: Sequence[float], gammas: Sequence[float], tail_from: float = 8.0, stderr: Sequence[float] | None = None) -> GammaTailFit:
    """Fit ``A`` from ``tau**3 Gamma(tau)`` on the tail and the correction bound ``B``.

    ``D`` is the slope of ``Gamma`` at the left end of the table; it is
    recorded and has no downstream use.
    """
    taus = np.asarray(taus, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    tail = taus >= tail_from
    if tail.sum() < 2:
        tail = taus >= taus[max(0, taus.size - 2)]
    scaled = taus[tail] ** 3 * gammas[tail]
    A = float(np.mean(scaled))
    if stderr is not None:
        se = np.asarray(stderr, dtype=float)[tail] * taus[tail] ** 3
        A_stderr = float(np.sqrt(np.sum(se**2)) / tail.sum())
    else:
        A_stderr = float(np.std(scaled, ddof=1) / np.sqrt(tail.sum())) if tail.sum() > 1 else 0.0
    residual = float(np.max(np.abs(scaled - A)) / abs(A)) if A != 0 else float("inf")
    model_curve = A / (1.0 + taus**3)
    B = float(np.max(np.abs(gammas - model_curve) * (1.0 + taus**5) / taus)) if A > 0 else float("inf")
    D = float((gammas[1] - gammas[0]) / (taus[1] - taus[0])) if taus.size > 1 else 0.0
    return GammaTailFit(A=A, A_stderr=A_stderr, relative_residual=residual, B=B, D=D, tail_points=int(tail.sum()))


# -- tables ----------------------------------------------------------------


def tabulate_gamma(model: CoefficientModel, tau_min: float = DEFAULT_TAU_GRID[0], tau_max: float = DEFAULT_TAU_GRID[1], n: int = DEFAULT_TAU_GRID[2]) -> tuple[np.ndarray, np.ndarray]:
    taus = log_grid(tau_min, tau_max, n)
    return taus, np.asarray(gamma(model, taus))


def write_gamma_table(path: Path, taus, gammas, stderr=None, *, header: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        for line in header:
            handle.write(f"# {line}\n")
        writer = csv.writer(handle)
        columns = ["tau", "gamma"] + (["stderr"] if stderr is not None else [])
        writer.writerow(columns)
        for i, tau in enumerate(taus):
            row = [format(float(tau), ".17g"), format(float(gammas[i]), ".17g")]
            if stderr is not None:
                row.append(format(float(stderr[i]), ".17g"))
            writer.writerow(row)
    return path


def load_gamma_table(path: Path | str, d: int = 3, A: float | None = None) -> CoefficientModel:
    """Read a ``tau,gamma[,stderr]`` CSV into an empirical coefficient model."""
    try:
        with Path(path).open(encoding="utf-8") as handle:
            rows = list(csv.DictReader(line for line in handle if not line.startswith("#")))
    except OSError as exc:
        raise CoefficientError(f"cannot read gamma table {path}: {exc}") from exc
    if not rows or "tau" not in rows[0] or "gamma" not in rows[0]:
        raise CoefficientError(f"gamma table {path} must have columns tau,gamma")
    try:
        taus = [float(r["tau"]) for r in rows]
        gammas = [float(r["gamma"]) for r in rows]
        stderr = [float(r["stderr"]) for r in rows] if "stderr" in rows[0] and rows[0]["stderr"] not in (None, "") else None
    except ValueError as exc:
        raise CoefficientError(f"gamma table {path} has a non-numeric entry") from exc
    return CoefficientModel.from_table(taus, gammas, stderr=stderr, d=d, A=A)
