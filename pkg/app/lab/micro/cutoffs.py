"""Low-energy cutoff functions.

``phi_delta`` equals 1 above ``delta`` and ``sqrt(s / delta)`` below ``delta / 8``.
On the window in between, ``psi = ln phi_delta`` is a fixed quintic in
``x = ln s`` that matches value, slope and curvature at both ends and is
monotone, so ``phi_delta`` is C2 and nondecreasing.

Derived functions, with ``s = e**z``:

* ``omega_delta(z) = sqrt(2) e**(z/2) / phi_delta(s)``,
* ``zeta_delta(z) = sqrt(2) e**(z/2) phi_delta'(s)``,
* ``energy_map(s)`` with ``energy_map' = 1 / phi_delta`` and ``energy_map(s) = s`` for ``s >= delta``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

from app.errors import CoefficientError

WINDOW = float(np.log(8.0))
SQRT2 = float(np.sqrt(2.0))


def _p(u):
    return 0.5 * u + 2.0 * u**3 - 3.5 * u**4 + 1.5 * u**5


def _q(u):
    return 0.5 + 6.0 * u**2 - 14.0 * u**3 + 7.5 * u**4


def _psi_hat(y):
    """``ln phi`` as a function of ``y = ln(s / delta)``; independent of delta."""
    y = np.asarray(y, dtype=float)
    u = np.clip((y + WINDOW) / WINDOW, 0.0, 1.0)
    below = 0.5 * y
    inside = -0.5 * WINDOW + WINDOW * _p(u)
    return np.where(y <= -WINDOW, below, np.where(y >= 0.0, 0.0, inside))


def _dpsi_hat(y):
    y = np.asarray(y, dtype=float)
    u = np.clip((y + WINDOW) / WINDOW, 0.0, 1.0)
    return np.where(y <= -WINDOW, 0.5, np.where(y >= 0.0, 0.0, _q(u)))


@lru_cache(maxsize=1)
def _window_integral(points: int = 513) -> CubicSpline:
    """Spline of ``F(y) = int_y^0 exp(t - psi_hat(t)) dt`` on the window."""
    ys = np.linspace(-WINDOW, 0.0, points)
    pieces = [quad(lambda t: float(np.exp(t - _psi_hat(t))), a, b, epsabs=1e-15, epsrel=1e-13)[0] for a, b in zip(ys[:-1], ys[1:])]
    tail = np.concatenate([np.cumsum(pieces[::-1])[::-1], [0.0]])
    return CubicSpline(ys, tail)


class CutoffFamily:
    def __init__(self, delta: float):
        if not delta > 0:
            raise CoefficientError(f"cutoff delta must be positive, got {delta}")
        self.delta = float(delta)
        self.log_delta = float(np.log(delta))
        spline = _window_integral()
        full = float(spline(-WINDOW))
        self._below_offset = self.delta * (1.0 - full - 2.0 / np.sqrt(8.0))

    def __repr__(self) -> str:
        return f"CutoffFamily(delta={self.delta!r})"

    def _check(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if np.any(~(s > 0)):
            raise CoefficientError("cutoff functions need strictly positive energies")
        return s

    def log_phi(self, z):
        """``ln phi_delta(e**z)``."""
        return _psi_hat(np.asarray(z, dtype=float) - self.log_delta)

    def phi(self, s):
        s = self._check(s)
        return _ret(np.exp(self.log_phi(np.log(s))))

    def phi_of_log(self, z):
        return _ret(np.exp(self.log_phi(z)))

    def phi_prime(self, s):
        s = self._check(s)
        z = np.log(s)
        return _ret(np.exp(self.log_phi(z)) * _dpsi_hat(z - self.log_delta) / s)

    def omega(self, z):
        z = np.asarray(z, dtype=float)
        return _ret(SQRT2 * np.exp(0.5 * z - self.log_phi(z)))

    def zeta(self, z):
        z = np.asarray(z, dtype=float)
        return _ret(SQRT2 * np.exp(self.log_phi(z) - 0.5 * z) * _dpsi_hat(z - self.log_delta))

    def energy_map(self, s):
        s = self._check(s)
        y = np.log(s) - self.log_delta
        window = self.delta * (1.0 - _window_integral()(np.clip(y, -WINDOW, 0.0)))
        below = 2.0 * np.sqrt(self.delta * s) + self._below_offset
        return _ret(np.where(y >= 0.0, s, np.where(y <= -WINDOW, below, window)))

    def energy_map_of_log(self, z):
        return self.energy_map(np.exp(np.asarray(z, dtype=float)))


def _ret(value):
    return value.item() if np.ndim(value) == 0 else value


def phi_delta(s, delta: float):
    return CutoffFamily(delta).phi(s)


def omega_delta(z, delta: float):
    return CutoffFamily(delta).omega(z)


def zeta_delta(z, delta: float):
    return CutoffFamily(delta).zeta(z)
