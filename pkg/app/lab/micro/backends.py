"""Fast chaotic backends and coupling potentials.

``HyperbolicSurface`` realises the unit tangent bundle of the genus-two
surface obtained from the regular hyperbolic octagon with angles pi/4 by
pairing opposite sides. A point is a matrix ``g`` in SL(2, R) taken modulo
the deck group: the base point is ``g . i`` in the upper half plane and
the unit velocity is the image of the upward vector at ``i``. The geodesic
flow is right multiplication by ``diag(e**(t/2), e**(-t/2))``.

``CatMapTorus`` iterates the automorphism ``(2, 1; 1, 1)`` of the 2-torus in
exact integer arithmetic on the grid ``(Z / 2**32)**2``. A suspension phase
in ``[0, 1)`` carries the fractional part of the elapsed time.

State arrays carry arbitrary leading batch axes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from app.errors import FundamentalDomainError

logger = logging.getLogger(__name__)

SIDES = 8
COSH_INRADIUS = 1.0 + math.sqrt(2.0)
INRADIUS = math.acosh(COSH_INRADIUS)
TRANSLATION_LENGTH = 2.0 * INRADIUS
COSH_CIRCUMRADIUS = (1.0 + math.sqrt(2.0)) ** 2
DISK_RADIUS = math.tanh(0.5 * math.acosh(COSH_CIRCUMRADIUS))
MAX_REDUCTIONS = 64

FLOW_GENERATOR = np.array([[0.5, 0.0], [0.0, -0.5]])
ROTATION_GENERATOR = np.array([[0.0, -0.5], [0.5, 0.0]])
REVERSAL = np.array([[0.0, -1.0], [1.0, 0.0]])


def flow_matrix(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape + (2, 2))
    out[..., 0, 0] = np.exp(0.5 * t)
    out[..., 1, 1] = np.exp(-0.5 * t)
    return out


def rotation_matrix(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(0.5 * theta), np.sin(0.5 * theta)
    out = np.empty(theta.shape + (2, 2))
    out[..., 0, 0], out[..., 0, 1] = c, -s
    out[..., 1, 0], out[..., 1, 1] = s, c
    return out


def _side_pairings() -> np.ndarray:
    """Translations ``T_k`` along the axes through ``i`` at angles ``k pi / 4``."""
    out = []
    for k in range(SIDES):
        k_mat = np.array(
            [[math.cos(k * math.pi / 8), math.sin(k * math.pi / 8)], [-math.sin(k * math.pi / 8), math.cos(k * math.pi / 8)]]
        )
        out.append(k_mat @ flow_matrix(TRANSLATION_LENGTH) @ np.linalg.inv(k_mat))
    return np.stack(out)


def mobius(g: np.ndarray, z: np.ndarray) -> np.ndarray:
    return (g[..., 0, 0] * z + g[..., 0, 1]) / (g[..., 1, 0] * z + g[..., 1, 1])


def determinant(g: np.ndarray) -> np.ndarray:
    return g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]


def renormalize(g: np.ndarray) -> np.ndarray:
    return g / np.sqrt(determinant(g))[..., None, None]


class FastBackend(Protocol):
    name: str

    def sample_uniform(self, rng: np.random.Generator, size: int | tuple[int, ...]): ...

    def advance(self, state, duration): ...


class HyperbolicSurface:
    name = "hyperbolic"

    def __init__(self) -> None:
        self.generators = _side_pairings()
        self.inverses = np.linalg.inv(self.generators)
        self.centres = mobius(self.generators, np.full(SIDES, 1j))

    def base_point(self, g: np.ndarray) -> np.ndarray:
        return mobius(g, 1j)

    def velocity(self, g: np.ndarray) -> np.ndarray:
        """Euclidean velocity (as a complex number) of the frame's unit vector."""
        return 1j / (g[..., 1, 0] * 1j + g[..., 1, 1]) ** 2

    def normal(self, g: np.ndarray) -> np.ndarray:
        return self.velocity(g @ rotation_matrix(0.5 * math.pi))

    def reverse(self, g: np.ndarray) -> np.ndarray:
        return g @ REVERSAL

    def _distance_key(self, z: np.ndarray, w: np.ndarray) -> np.ndarray:
        # monotone in the hyperbolic distance for a fixed z
        return np.abs(z - w) ** 2 / w.imag

    def in_domain(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        own = self._distance_key(z, np.full_like(z, 1j))
        others = self._distance_key(z[..., None], self.centres)
        return np.all(others >= own[..., None], axis=-1)

    def reduce(self, g: np.ndarray) -> np.ndarray:
        """Left-multiply by deck transformations until the base point lies in the octagon."""
        g = np.array(g, dtype=float, copy=True)
        for _ in range(MAX_REDUCTIONS):
            z = self.base_point(g)
            own = self._distance_key(z, np.full_like(z, 1j))
            others = self._distance_key(z[..., None], self.centres)
            best = np.argmin(others, axis=-1)
            outside = np.take_along_axis(others, best[..., None], axis=-1)[..., 0] < own * (1.0 - 1e-14)
            if not outside.any():
                return renormalize(g)
            g[outside] = self.inverses[best[outside]] @ g[outside]
        raise FundamentalDomainError(f"fundamental domain reduction did not terminate in {MAX_REDUCTIONS} steps")

    def advance(self, g: np.ndarray, duration) -> np.ndarray:
        duration = np.asarray(duration, dtype=float)
        if np.all(duration == 0):
            return np.array(g, copy=True)
        return self.reduce(g @ flow_matrix(np.broadcast_to(duration, g.shape[:-2])))

    def frame_from_point(self, z: np.ndarray, theta: np.ndarray) -> np.ndarray:
        x, y = z.real, z.imag
        root = np.sqrt(y)
        lift = np.zeros(z.shape + (2, 2))
        lift[..., 0, 0] = root
        lift[..., 0, 1] = x / root
        lift[..., 1, 1] = 1.0 / root
        return lift @ rotation_matrix(theta)

    def sample_uniform(self, rng: np.random.Generator, size: int | tuple[int, ...]) -> np.ndarray:
        """Frames distributed by the Liouville measure of the unit tangent bundle."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        total = int(np.prod(shape, dtype=int))
        points: list[np.ndarray] = []
        have = 0
        while have < total:
            batch = max(64, 2 * (total - have))
            w = DISK_RADIUS * np.sqrt(rng.random(batch)) * np.exp(2j * math.pi * rng.random(batch))
            weight = ((1.0 - DISK_RADIUS**2) / (1.0 - np.abs(w) ** 2)) ** 2
            accept = rng.random(batch) < weight
            z = 1j * (1.0 + w[accept]) / (1.0 - w[accept])
            z = z[self.in_domain(z)]
            points.append(z)
            have += z.size
        z = np.concatenate(points)[:total]
        theta = 2.0 * math.pi * rng.random(total)
        return self.frame_from_point(z, theta).reshape(shape + (2, 2))


@dataclass
class TorusState:
    points: np.ndarray
    phase: np.ndarray

    @property
    def coordinates(self) -> np.ndarray:
        return self.points.astype(float) / CatMapTorus.MODULUS


class CatMapTorus:
    name = "torus"
    MODULUS = 2**32
    MATRIX = np.array([[2, 1], [1, 1]], dtype=np.int64)

    def step(self, points: np.ndarray) -> np.ndarray:
        x, y = points[..., 0], points[..., 1]
        out = np.empty_like(points)
        out[..., 0] = (2 * x + y) % self.MODULUS
        out[..., 1] = (x + y) % self.MODULUS
        return out

    def iterate(self, points: np.ndarray, n: int) -> np.ndarray:
        for _ in range(int(n)):
            points = self.step(points)
        return points

    def sample_points(self, rng: np.random.Generator, size: int | tuple[int, ...]) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        return rng.integers(0, self.MODULUS, size=shape + (2,), dtype=np.int64)

    def sample_uniform(self, rng: np.random.Generator, size: int | tuple[int, ...]) -> TorusState:
        points = self.sample_points(rng, size)
        return TorusState(points=points, phase=np.zeros(points.shape[:-1]))

    def advance(self, state: TorusState, duration) -> TorusState:
        total = state.phase + np.asarray(duration, dtype=float)
        whole = np.floor(total).astype(np.int64)
        points = state.points.copy()
        for k in range(int(whole.max(initial=0))):
            due = whole > k
            points[due] = self.step(points[due])
        return TorusState(points=points, phase=total - whole)

    def observe(self, state: TorusState, observable: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Observable along the suspension: linear in the phase between ``u`` and ``f(u)``."""
        here = observable(state.coordinates)
        there = observable(self.step(state.points).astype(float) / self.MODULUS)
        return (1.0 - state.phase) * here + state.phase * there


TORUS_OBSERVABLES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "zero": lambda u: np.zeros(u.shape[:-1]),
    "cos1": lambda u: np.cos(2.0 * math.pi * u[..., 0]),
    "correlated": lambda u: np.cos(2.0 * math.pi * u[..., 0]) + np.cos(2.0 * math.pi * (2.0 * u[..., 0] + u[..., 1])),
    "coboundary": lambda u: np.cos(2.0 * math.pi * (2.0 * u[..., 0] + u[..., 1])) - np.cos(2.0 * math.pi * u[..., 0]),
}

# Green-Kubo variances of the named observables under the cat map.
TORUS_SIGMA_SQ = {"zero": 0.0, "cos1": 0.5, "correlated": 2.0, "coboundary": 0.0}


# -- potentials ----------------------------------------------------------------


class Potential(Protocol):
    name: str

    def single(self, g: np.ndarray) -> np.ndarray: ...

    def value(self, gx: np.ndarray, gy: np.ndarray) -> np.ndarray: ...


class ConstantPotential:
    name = "constant"

    def __init__(self, level: float = 1.0):
        self.level = float(level)

    def single(self, g: np.ndarray) -> np.ndarray:
        return np.full(g.shape[:-2], math.sqrt(abs(self.level)))

    def value(self, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
        return np.full(np.broadcast_shapes(gx.shape[:-2], gy.shape[:-2]), self.level)

    def current(self, surface: HyperbolicSurface, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(gx.shape[:-2], gy.shape[:-2]))


class ProductBumpPotential:
    """``V(q1, q2) = u(q1) u(q2)`` with ``u`` a bump in the distance to the orbit of ``i``.

    ``u = exp(1 - 1 / (1 - s))`` with ``s = (cosh r - 1) / (cosh R - 1)``; the
    radius ``R`` stays below the inradius so ``u`` vanishes near the sides.
    """

    name = "product-bump"

    def __init__(self, radius: float | None = None):
        self.radius = 0.9 * INRADIUS if radius is None else float(radius)
        if not 0 < self.radius < INRADIUS:
            raise ValueError(f"bump radius must lie in (0, {INRADIUS:.6f})")
        self._scale = math.cosh(self.radius) - 1.0

    def _s(self, z: np.ndarray) -> np.ndarray:
        x, y = z.real, z.imag
        return ((x * x + y * y + 1.0) / (2.0 * y) - 1.0) / self._scale

    def bump(self, z: np.ndarray) -> np.ndarray:
        s = self._s(z)
        inside = s < 1.0
        safe = np.where(inside, s, 0.0)
        return np.where(inside, np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0)

    def bump_derivative(self, z: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """Derivative of the bump at ``z`` along the Euclidean vector ``direction``."""
        x, y = z.real, z.imag
        dx, dy = direction.real, direction.imag
        df = (x / y) * dx + ((y * y - x * x - 1.0) / (2.0 * y * y)) * dy
        s = self._s(z)
        inside = s < 1.0
        safe = np.where(inside, s, 0.0)
        u = np.where(inside, np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0)
        return np.where(inside, -u / (1.0 - safe) ** 2 * df / self._scale, 0.0)

    def single(self, g: np.ndarray) -> np.ndarray:
        return self.bump(mobius(g, 1j))

    def value(self, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
        return self.single(gx) * self.single(gy)

    def single_current(self, surface: HyperbolicSurface, g: np.ndarray) -> np.ndarray:
        return self.bump_derivative(surface.base_point(g), surface.velocity(g))

    def single_normal(self, surface: HyperbolicSurface, g: np.ndarray) -> np.ndarray:
        return self.bump_derivative(surface.base_point(g), surface.normal(g))

    def current(self, surface: HyperbolicSurface, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
        return self.single_current(surface, gx) * self.single(gy)


CURRENT_STEP = 1e-5


def coupling_current(surface: HyperbolicSurface, xi_x: np.ndarray, xi_y: np.ndarray, potential) -> np.ndarray:
    """Derivative of ``V(q_x, q_y)`` along the unit-speed flow in the x slot."""
    analytic = getattr(potential, "current", None)
    if analytic is not None:
        return analytic(surface, xi_x, xi_y)
    forward = surface.advance(xi_x, CURRENT_STEP)
    backward = surface.advance(xi_x, -CURRENT_STEP)
    return (potential.value(forward, xi_y) - potential.value(backward, xi_y)) / (2.0 * CURRENT_STEP)


def advance_fast(backend, xi, speed, h: float):
    """Advance a fast phase by flow time ``speed * h``."""
    return backend.advance(xi, np.asarray(speed, dtype=float) * h)


def make_backend(name: str):
    if name == "hyperbolic":
        return HyperbolicSurface()
    if name == "torus":
        return CatMapTorus()
    raise ValueError(f"unknown backend {name!r}")


def make_potential(name: str, radius: float | None = None):
    if name == "product-bump":
        return ProductBumpPotential(radius)
    if name == "constant":
        return ConstantPotential()
    raise ValueError(f"unknown potential {name!r}")
