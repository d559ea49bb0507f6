"""Trajectory records and their CSV/JSON output contract."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


@dataclass
class TrajectoryRecord:
    """Sampled energies of one run.

    ``energies`` has shape ``(len(times), n_vertices)``. When the run stopped
    at the threshold time the last sample is taken at ``stop_time``.
    """

    times: np.ndarray
    energies: np.ndarray
    stopped: bool
    stop_time: float | None
    seed: int
    config_digest: str
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.energies = np.atleast_2d(np.asarray(self.energies, dtype=float))
        if self.energies.shape[0] != self.times.shape[0]:
            raise ValueError("times and energies must have the same number of samples")

    @property
    def final_energies(self) -> np.ndarray:
        return self.energies[-1]

    @property
    def n_vertices(self) -> int:
        return self.energies.shape[1]

    def is_consistent(self) -> bool:
        increasing = bool(np.all(np.diff(self.times) > 0))
        return increasing and bool(np.all(self.energies > 0))

    def sidecar(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "configDigest": self.config_digest,
            "stopped": self.stopped,
            "stopTime": self.stop_time,
            "samples": int(self.times.shape[0]),
            "vertices": self.n_vertices,
            "metadata": self.metadata,
        }


@dataclass
class EnsembleRecord:
    members: list[TrajectoryRecord]
    seed: int
    config_digest: str
    metadata: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.members)

    def final_energies(self) -> np.ndarray:
        return np.stack([member.final_energies for member in self.members])

    def stopped_fraction(self) -> float:
        if not self.members:
            return 0.0
        return float(np.mean([member.stopped for member in self.members]))

    def sidecar(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "configDigest": self.config_digest,
            "members": len(self.members),
            "stopped": [member.stopped for member in self.members],
            "stopTimes": [member.stop_time for member in self.members],
            "metadata": self.metadata,
        }


def open_csv(path: Path, seed: int, config_digest: str, columns: Sequence[str]):
    """Open ``path`` for writing, emit the seed and digest header and return ``(handle, writer)``."""
    handle = Path(path).open("w", newline="", encoding="utf-8")
    handle.write(f"# seed={seed}\n# config_digest={config_digest}\n")
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(columns)
    return handle, writer


def write_trajectory(record: TrajectoryRecord, directory: Path, stem: str = "trajectory") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    json_path = directory / f"{stem}.json"
    handle, writer = open_csv(csv_path, record.seed, record.config_digest, ["t"] + [f"E_{i}" for i in range(record.n_vertices)])
    with handle:
        for t, row in zip(record.times, record.energies):
            writer.writerow([_fmt(t)] + [_fmt(e) for e in row])
    json_path.write_text(json.dumps(record.sidecar(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [csv_path, json_path]


def write_ensemble(ensemble: EnsembleRecord, directory: Path, stem: str = "ensemble") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    json_path = directory / f"{stem}.json"
    n_vertices = ensemble.members[0].n_vertices if ensemble.members else 0
    handle, writer = open_csv(csv_path, ensemble.seed, ensemble.config_digest, ["member", "t"] + [f"E_{i}" for i in range(n_vertices)])
    with handle:
        for index, member in enumerate(ensemble.members):
            for t, row in zip(member.times, member.energies):
                writer.writerow([index, _fmt(t)] + [_fmt(e) for e in row])
    json_path.write_text(json.dumps(ensemble.sidecar(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [csv_path, json_path]


def read_trajectory_csv(path: Path) -> tuple[dict[str, str], np.ndarray, np.ndarray]:
    """Read a trajectory CSV back into (header fields, times, energies)."""
    header: dict[str, str] = {}
    rows: list[list[float]] = []
    with Path(path).open(newline="", encoding="utf-8") as handle:
        for row in csv.reader(handle):
            if not row:
                continue
            if row[0].startswith("#"):
                key, _, value = row[0][1:].strip().partition("=")
                header[key] = value
            elif row[0] != "t":
                rows.append([float(x) for x in row])
    data = np.asarray(rows, dtype=float)
    return header, data[:, 0], data[:, 1:]
