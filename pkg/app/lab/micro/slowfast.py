"""Slow-fast maps ``(x, z) -> (f(x), z + eps A(x, z, eps))`` over the cat map."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from app.errors import CorrelationError
from app.lab.micro.backends import TORUS_OBSERVABLES, CatMapTorus
from app.lab.records import open_csv
from app.lab.rng import make_rng

logger = logging.getLogger(__name__)

Coupling = Callable[[np.ndarray, np.ndarray, float], np.ndarray]

MEAN_STREAM = "slowfast-mean"
PATH_STREAM = "slowfast"
MEAN_SAMPLES = 100_000


def named_coupling(name: str) -> Coupling:
    try:
        observable = TORUS_OBSERVABLES[name]
    except KeyError as exc:
        raise ValueError(f"unknown observable {name!r}; choose one of {sorted(TORUS_OBSERVABLES)}") from exc
    return lambda u, z, eps: observable(u)


@dataclass
class SlowPaths:
    """Slow coordinates on the rescaled grid; ``paths`` is ``(members, len(times))``."""

    times: np.ndarray
    paths: np.ndarray
    epsilon: float
    steps: int
    seed: int
    metadata: dict[str, Any] = field(default_factory=dict)

    def variance_at(self, t: float) -> float:
        column = int(np.argmin(np.abs(self.times - t)))
        return float(np.var(self.paths[:, column] - self.paths[:, 0], ddof=1))

    @property
    def final_variance(self) -> float:
        return float(np.var(self.paths[:, -1] - self.paths[:, 0], ddof=1))


def check_zero_mean(fast_map: CatMapTorus, coupling: Coupling, z: float, seed: int, samples: int = MEAN_SAMPLES) -> tuple[float, float]:
    """Monte Carlo mean of ``A(., z, 0)`` under the invariant measure; raises if it is not zero."""
    rng = make_rng(seed, MEAN_STREAM, 0)
    u = fast_map.sample_points(rng, samples).astype(float) / fast_map.MODULUS
    values = np.asarray(coupling(u, np.full(samples, z), 0.0), dtype=float)
    mean = float(values.mean())
    stderr = float(values.std(ddof=1) / math.sqrt(samples))
    if abs(mean) > 4.0 * stderr + 1e-12:
        raise CorrelationError(f"slow coupling has mean {mean:.3e} (standard error {stderr:.1e}); it must average to zero")
    return mean, stderr


def simulate_slow_fast_map(
    fast_map: CatMapTorus,
    coupling: Coupling | str,
    epsilon: float,
    t_end: float,
    ensemble: int,
    seed: int,
    *,
    z0: float = 0.0,
    samples: int = 100,
) -> SlowPaths:
    """Iterate the slow-fast map for ``ceil(t_end / eps**2)`` steps per member.

    Path values are recorded on the rescaled grid ``t = n eps**2``.
    """
    if not epsilon > 0 or not t_end > 0 or ensemble < 2:
        raise ValueError("epsilon and t_end must be positive and the ensemble needs at least two members")
    if isinstance(coupling, str):
        coupling = named_coupling(coupling)
    check_zero_mean(fast_map, coupling, z0, seed)

    steps = int(math.ceil(t_end / epsilon**2 - 1e-9))
    stride = max(1, steps // samples)
    points = fast_map.sample_points(make_rng(seed, PATH_STREAM, 0), ensemble)
    z = np.full(ensemble, float(z0))
    times = [0.0]
    paths = [z.copy()]
    for n in range(1, steps + 1):
        u = points.astype(float) / fast_map.MODULUS
        z = z + epsilon * np.asarray(coupling(u, z, epsilon), dtype=float)
        points = fast_map.step(points)
        if n % stride == 0 or n == steps:
            times.append(n * epsilon**2)
            paths.append(z.copy())
    logger.info("slow-fast map: eps=%g steps=%d members=%d", epsilon, steps, ensemble)
    return SlowPaths(
        times=np.asarray(times),
        paths=np.stack(paths, axis=1),
        epsilon=float(epsilon),
        steps=steps,
        seed=seed,
        metadata={"stride": stride, "z0": z0},
    )


def write_slow_paths(paths: SlowPaths, directory: Path, config_digest: str, stem: str = "slow_paths") -> list[Path]:
    """``member,t,z`` rows under the usual seed and digest header, plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    json_path = directory / f"{stem}.json"
    handle, writer = open_csv(csv_path, paths.seed, config_digest, ["member", "t", "z"])
    with handle:
        for member, row in enumerate(paths.paths):
            writer.writerows([member, f"{t:.17g}", f"{z:.17g}"] for t, z in zip(paths.times, row))
    sidecar = {
        "seed": paths.seed,
        "configDigest": config_digest,
        "epsilon": paths.epsilon,
        "steps": paths.steps,
        "members": int(paths.paths.shape[0]),
        "finalVariance": paths.final_variance,
        "metadata": paths.metadata,
    }
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [csv_path, json_path]
