"""Interaction graphs for the microscopic and mesoscopic dynamics.

Vertices are dense integers ``0..n-1``. Each undirected edge is stored once
as ``(lo, hi)`` with ``lo < hi``; antisymmetric edge quantities are oriented
from ``lo`` to ``hi`` at their use sites.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Hashable, Iterable, Sequence

import numpy as np
from pydantic import BaseModel
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from app.errors import GraphError

logger = logging.getLogger(__name__)


class GraphValidationReport(BaseModel):
    ok: bool
    vertices: int
    edges: int
    loops: list[tuple[int, int]] = []
    duplicates: list[tuple[int, int]] = []
    asymmetries: list[tuple[int, int]] = []
    components: int = 1

    @property
    def connected(self) -> bool:
        return self.components <= 1


@dataclass(frozen=True)
class InteractionGraph:
    vertices: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    adjacency: tuple[tuple[int, ...], ...]
    coordinates: tuple[tuple[int, ...], ...] | None = None
    labels: tuple[Hashable, ...] | None = None
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    @classmethod
    def from_edges(
        cls,
        n_vertices: int,
        edges: Iterable[tuple[int, int]],
        *,
        coordinates: Sequence[Sequence[int]] | None = None,
        labels: Sequence[Hashable] | None = None,
        meta: dict[str, Any] | None = None,
    ) -> "InteractionGraph":
        canonical = tuple((min(i, j), max(i, j)) for i, j in edges)
        neighbours: list[list[int]] = [[] for _ in range(n_vertices)]
        for lo, hi in canonical:
            if not (0 <= lo < n_vertices and 0 <= hi < n_vertices):
                raise GraphError(f"edge ({lo}, {hi}) references a vertex outside 0..{n_vertices - 1}")
            neighbours[lo].append(hi)
            if hi != lo:
                neighbours[hi].append(lo)
        return cls(
            vertices=tuple(range(n_vertices)),
            edges=canonical,
            adjacency=tuple(tuple(sorted(ns)) for ns in neighbours),
            coordinates=tuple(tuple(c) for c in coordinates) if coordinates is not None else None,
            labels=tuple(labels) if labels is not None else None,
            meta=dict(meta or {}),
        )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def heads(self) -> np.ndarray:
        """Lower endpoint of every edge."""
        return np.fromiter((e[0] for e in self.edges), dtype=np.intp, count=self.n_edges)

    @cached_property
    def tails(self) -> np.ndarray:
        return np.fromiter((e[1] for e in self.edges), dtype=np.intp, count=self.n_edges)

    def degree(self) -> np.ndarray:
        return np.array([len(ns) for ns in self.adjacency], dtype=np.intp)

    @cached_property
    def incidence(self):
        """Sparse (edges x vertices) matrix, +1 at the lower and -1 at the upper endpoint."""
        rows = np.repeat(np.arange(self.n_edges), 2)
        cols = np.column_stack([self.heads, self.tails]).ravel()
        data = np.tile([1.0, -1.0], self.n_edges)
        return coo_matrix((data, (rows, cols)), shape=(self.n_edges, self.n_vertices)).tocsr()

    def edge_divergence(self, flux: np.ndarray) -> np.ndarray:
        """Per-vertex change from per-edge fluxes oriented lo -> hi.

        ``flux`` is ``(n_edges,)`` or ``(batch, n_edges)``. The lower endpoint
        gains ``flux`` and the upper endpoint loses it.
        """
        flux = np.asarray(flux, dtype=float)
        if self.n_edges == 0:
            return np.zeros(flux.shape[:-1] + (self.n_vertices,))
        if flux.ndim == 1:
            return np.asarray(self.incidence.T @ flux)
        return np.asarray(self.incidence.T @ flux.T).T

    def adjacency_matrix(self):
        data = np.ones(2 * self.n_edges)
        rows = np.concatenate([self.heads, self.tails])
        cols = np.concatenate([self.tails, self.heads])
        return coo_matrix((data, (rows, cols)), shape=(self.n_vertices, self.n_vertices)).tocsr()

    def to_json(self) -> dict[str, Any]:
        vertices = list(self.labels) if self.labels is not None else list(self.vertices)
        return {"vertices": vertices, "edges": [[vertices[i], vertices[j]] for i, j in self.edges]}


def validate(graph: InteractionGraph) -> GraphValidationReport:
    loops = [e for e in graph.edges if e[0] == e[1]]
    seen: set[tuple[int, int]] = set()
    duplicates: list[tuple[int, int]] = []
    for lo, hi in graph.edges:
        key = (min(lo, hi), max(lo, hi))
        if key in seen:
            duplicates.append(key)
        seen.add(key)
    asymmetries = []
    for x, neighbours in enumerate(graph.adjacency):
        for y in neighbours:
            if y >= graph.n_vertices or x not in graph.adjacency[y]:
                asymmetries.append((x, y))
    components = 0
    if graph.n_vertices:
        components, _ = connected_components(graph.adjacency_matrix(), directed=False)
    ok = not loops and not duplicates and not asymmetries and components <= 1
    return GraphValidationReport(
        ok=ok,
        vertices=graph.n_vertices,
        edges=graph.n_edges,
        loops=loops,
        duplicates=duplicates,
        asymmetries=asymmetries,
        components=int(components),
    )


def _axis_range(axis: Any) -> tuple[int, int]:
    if isinstance(axis, range):
        if axis.step != 1 or len(axis) == 0:
            raise GraphError(f"box axis {axis!r} must be a nonempty unit-step range")
        return axis.start, axis.stop - 1
    try:
        lo, hi = (int(v) for v in axis)
    except (TypeError, ValueError) as exc:
        raise GraphError(f"box axis {axis!r} must be an inclusive (lo, hi) pair") from exc
    if hi < lo:
        raise GraphError(f"box axis {axis!r} is empty")
    return lo, hi


def build_lattice_region(lattice_dim: int, box: Sequence[Any]) -> InteractionGraph:
    """Box ``[lo_1..hi_1] x ... x [lo_d..hi_d]`` of the lattice with nearest-neighbour edges.

    Axis bounds are inclusive. Vertices are numbered in lexicographic order
    of their coordinates, so translated boxes yield identical edge lists.
    """
    if lattice_dim < 1:
        raise GraphError("lattice_dim must be a positive integer")
    if not box:
        raise GraphError("box must be nonempty")
    if len(box) != lattice_dim:
        raise GraphError(f"box has {len(box)} axes, expected {lattice_dim}")
    bounds = [_axis_range(axis) for axis in box]
    points = list(itertools.product(*(range(lo, hi + 1) for lo, hi in bounds)))
    index = {p: i for i, p in enumerate(points)}
    edges = []
    for p, i in index.items():
        for axis in range(lattice_dim):
            q = p[:axis] + (p[axis] + 1,) + p[axis + 1 :]
            j = index.get(q)
            if j is not None:
                edges.append((i, j))
    return InteractionGraph.from_edges(
        len(points), edges, coordinates=points, meta={"kind": "lattice", "lattice_dim": lattice_dim}
    )


def build_chain(n: int) -> InteractionGraph:
    if n < 1:
        raise GraphError("chain needs at least one site")
    return build_lattice_region(1, [(0, n - 1)])


def build_complete_graph(n: int) -> InteractionGraph:
    if n < 2:
        raise GraphError(f"complete graph needs n >= 2, got {n}")
    edges = list(itertools.combinations(range(n), 2))
    return InteractionGraph.from_edges(n, edges, meta={"kind": "complete"})


def graph_from_document(document: dict[str, Any]) -> InteractionGraph:
    try:
        raw_vertices = list(document["vertices"])
        raw_edges = [tuple(edge) for edge in document["edges"]]
    except (KeyError, TypeError) as exc:
        raise GraphError("graph document needs 'vertices' and 'edges' lists") from exc
    index = {v: i for i, v in enumerate(raw_vertices)}
    if len(index) != len(raw_vertices):
        raise GraphError("graph document lists a vertex twice")
    edges = []
    for edge in raw_edges:
        if len(edge) != 2:
            raise GraphError(f"edge {list(edge)} must have two endpoints")
        try:
            edges.append((index[edge[0]], index[edge[1]]))
        except KeyError as exc:
            raise GraphError(f"edge {list(edge)} references unknown vertex {exc.args[0]!r}") from exc
    graph = InteractionGraph.from_edges(len(raw_vertices), edges, labels=raw_vertices, meta={"kind": "file"})
    report = validate(graph)
    if report.loops or report.duplicates or report.asymmetries:
        raise GraphError(
            f"invalid graph: loops={report.loops} duplicates={report.duplicates} asymmetries={report.asymmetries}"
        )
    if not report.connected:
        logger.warning("Loaded graph has %d connected components", report.components)
    return graph


def load_graph(path: Path | str) -> InteractionGraph:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphError(f"cannot read graph file {path}: {exc}") from exc
    return graph_from_document(document)
