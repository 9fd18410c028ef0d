"""Anchor node graph extraction and embedded deformation.

A :class:`NodeGraph` picks a sparse set of mesh vertices as control nodes,
assigns every vertex the nodes within an influence radius, and links two
nodes whenever they share a vertex. :func:`apply_deformation` blends the
per-node affine transforms over those influence sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import EmptyMesh, IsolatedVertex, NodeCountOutOfRange, SingularRotation, SizeMismatch
from .mesh_core import TriangleMesh

AUTO = "auto"

# "uniform" treats w_j = 1 as equal weights (averaged over the influence set),
# "uniform_sum" is the literal unnormalized sum of the w_j = 1 terms.
WEIGHT_MODES = ("uniform", "uniform_sum", "normalized_distance")


def _check_mode(weight_mode: str) -> None:
    if weight_mode not in WEIGHT_MODES:
        raise ValueError(f"unknown weight mode {weight_mode!r}; expected one of {WEIGHT_MODES}")


def _pair_distances(vertices: np.ndarray, nodes: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    d = vertices[rows] - nodes[cols]
    return np.sqrt((d * d).sum(axis=1))


class _Influence:
    """CSR influence structure shared by a graph and its rebased copies."""

    def __init__(self, ptr: np.ndarray, nodes: np.ndarray, node_count: int):
        self.ptr = ptr
        self.nodes = nodes
        self.node_count = node_count
        self.vertex_count = len(ptr) - 1
        self.counts = np.diff(ptr)
        self.rows = np.repeat(np.arange(self.vertex_count), self.counts)
        for a in (self.ptr, self.nodes, self.counts, self.rows):
            a.setflags(write=False)

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        m = sp.csr_matrix((data, self.nodes, self.ptr), shape=(self.vertex_count, self.node_count))
        m.has_sorted_indices = True
        return m

    @cached_property
    def uniform_matrix(self) -> sp.csr_matrix:
        return self.matrix(1.0 / self.counts[self.rows])

    @cached_property
    def sum_matrix(self) -> sp.csr_matrix:
        return self.matrix(np.ones(len(self.nodes)))

    @cached_property
    def edges(self) -> np.ndarray:
        s = self.sum_matrix
        co = (s.T @ s).tocoo()
        keep = co.row < co.col
        e = np.column_stack([co.row[keep], co.col[keep]]).astype(np.int64)
        e = e[np.lexsort((e[:, 1], e[:, 0]))]
        e.setflags(write=False)
        return e


@dataclass(frozen=True, eq=False)
class NodeGraph:
    """Control nodes, their influence sets and the node adjacency.

    Node positions are the anchor vertices' positions in the mesh the graph
    was built from or last rebased onto; influence sets and edges never
    change after extraction.
    """

    node_vertex_ids: np.ndarray
    node_positions: np.ndarray
    influence_radius: float
    _influence: _Influence
    _distances: np.ndarray

    @classmethod
    def build(cls, vertices: np.ndarray, node_vertex_ids: Sequence[int], influence_radius: float) -> "NodeGraph":
        """Build the influence sets ``{j : |v_i - p_j| < R}`` for fixed anchors.

        Raises :class:`IsolatedVertex` if some vertex has no node within R.
        """
        vertices = np.asarray(vertices, dtype=np.float64)
        ids = np.asarray(node_vertex_ids, dtype=np.int64)
        R = float(influence_radius)
        positions = vertices[ids]
        ptr, nodes, dist = _influence_csr(vertices, positions, R)
        counts = np.diff(ptr)
        if np.any(counts == 0):
            raise IsolatedVertex(int(np.flatnonzero(counts == 0)[0]), f"lies outside radius {R:g} of every node")
        ids.setflags(write=False)
        positions.setflags(write=False)
        dist.setflags(write=False)
        return cls(ids, positions, R, _Influence(ptr, nodes, len(ids)), dist)

    @property
    def node_count(self) -> int:
        return len(self.node_vertex_ids)

    @property
    def vertex_count(self) -> int:
        return self._influence.vertex_count

    @property
    def influence_ptr(self) -> np.ndarray:
        return self._influence.ptr

    @property
    def influence_nodes(self) -> np.ndarray:
        return self._influence.nodes

    @property
    def influence_counts(self) -> np.ndarray:
        return self._influence.counts

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) array of node pairs ``j < k`` sharing at least one vertex."""
        return self._influence.edges

    @property
    def pair_count(self) -> int:
        return len(self._influence.nodes)

    def has_edge(self, j: int, k: int) -> bool:
        a, b = min(j, k), max(j, k)
        e = self.edges
        return bool(np.any((e[:, 0] == a) & (e[:, 1] == b)))

    def influence_of(self, vertex: int) -> np.ndarray:
        inf = self._influence
        return inf.nodes[inf.ptr[vertex]:inf.ptr[vertex + 1]]

    def stored_weights(self, weight_mode: str = "uniform") -> np.ndarray:
        """Per influence pair weights w_j(v_i), aligned with :attr:`influence_nodes`.

        Uniform modes store 1 for every pair; the distance mode stores
        normalized ``(1 - D/R)^2`` computed at construction.
        """
        _check_mode(weight_mode)
        if weight_mode == "normalized_distance":
            return _distance_weights(self._distances, self.influence_radius, self._influence)
        return np.ones(self.pair_count)

    def influence_sets(self, weight_mode: str = "uniform") -> list[list[tuple[int, float]]]:
        w = self.stored_weights(weight_mode)
        ptr, nodes = self._influence.ptr, self._influence.nodes
        return [
            [(int(j), float(x)) for j, x in zip(nodes[ptr[i]:ptr[i + 1]], w[ptr[i]:ptr[i + 1]])]
            for i in range(self.vertex_count)
        ]

    def rebased(self, mesh: TriangleMesh) -> "NodeGraph":
        """Same graph with node positions read from ``mesh``'s anchor vertices."""
        if mesh.vertex_count != self.vertex_count:
            raise SizeMismatch(f"graph built for {self.vertex_count} vertices, mesh has {mesh.vertex_count}")
        positions = mesh.vertices[self.node_vertex_ids]
        positions.setflags(write=False)
        return NodeGraph(self.node_vertex_ids, positions, self.influence_radius, self._influence, self._distances)

    def blend_matrix(self, weight_mode: str, vertices: np.ndarray | None = None) -> sp.csr_matrix:
        """Sparse (V, N) matrix of effective blend weights.

        In distance mode the weights are recomputed from ``vertices`` and the
        current node positions; a vertex whose nodes all drifted outside R
        falls back to equal weights.
        """
        _check_mode(weight_mode)
        inf = self._influence
        if weight_mode == "uniform":
            return inf.uniform_matrix
        if weight_mode == "uniform_sum":
            return inf.sum_matrix
        if vertices is None:
            d = self._distances
        else:
            d = _pair_distances(vertices, self.node_positions, inf.rows, inf.nodes)
        return inf.matrix(_distance_weights(d, self.influence_radius, inf))


def _distance_weights(d: np.ndarray, R: float, inf: _Influence) -> np.ndarray:
    w = np.clip(1.0 - d / R, 0.0, None) ** 2
    totals = np.bincount(inf.rows, weights=w, minlength=inf.vertex_count)
    empty = totals == 0
    if np.any(empty):
        fallback = empty[inf.rows]
        w[fallback] = 1.0
        totals[empty] = inf.counts[empty]
    return w / totals[inf.rows]


def _influence_csr(vertices: np.ndarray, positions: np.ndarray, R: float):
    if R <= 0:
        return np.zeros(len(vertices) + 1, dtype=np.int64), np.zeros(0, np.int64), np.zeros(0)
    # the tree gives a slightly generous superset; membership is decided on the exact distance
    pairs = cKDTree(vertices).sparse_distance_matrix(
        cKDTree(positions), R * (1 + 1e-9), output_type="ndarray"
    )
    rows = pairs["i"].astype(np.int64)
    cols = pairs["j"].astype(np.int64)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    d = _pair_distances(vertices, positions, rows, cols)
    keep = d < R
    rows, cols, d = rows[keep], cols[keep], d[keep]
    ptr = np.zeros(len(vertices) + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=len(vertices)), out=ptr[1:])
    return ptr, cols, d


def pca_order(vertices: np.ndarray) -> np.ndarray:
    """Vertex indices sorted by projection on the first principal axis.

    The axis sign is fixed so its largest-magnitude component is positive;
    ties keep index order.
    """
    centered = vertices - vertices.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axis = vt[0]
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    return np.argsort(centered @ axis, kind="stable")


def even_ranks(total: int, count: int) -> np.ndarray:
    """``count`` evenly spaced ranks in ``[0, total)``, endpoints included."""
    if count == 1:
        return np.array([(total - 1) // 2], dtype=np.int64)
    k = np.arange(count, dtype=np.int64)
    # round-half-up of k * (total - 1) / (count - 1) in integer arithmetic
    return (2 * k * (total - 1) + (count - 1)) // (2 * (count - 1))


def auto_radius(vertices: np.ndarray, positions: np.ndarray) -> float:
    """Start at ``2 * diag / sqrt(N)`` and double until every vertex is covered."""
    diag = float(np.linalg.norm(vertices.max(axis=0) - vertices.min(axis=0)))
    if diag == 0:
        return 1.0
    R = 2.0 * diag / np.sqrt(len(positions))
    tree = cKDTree(positions)
    while True:
        nearest, _ = tree.query(vertices, k=1)
        if np.all(nearest < R * (1 - 1e-9)):
            return R
        R *= 2.0


def _check_node_count(mesh: TriangleMesh, node_count: int) -> None:
    if mesh.vertex_count == 0:
        raise EmptyMesh("cannot extract nodes from an empty mesh")
    if not 1 <= node_count <= mesh.vertex_count:
        raise NodeCountOutOfRange(f"node_count must be in [1, {mesh.vertex_count}], got {node_count}")


def _graph_for_ids(mesh: TriangleMesh, ids: np.ndarray, influence_radius) -> NodeGraph:
    if isinstance(influence_radius, str):
        if influence_radius != AUTO:
            raise ValueError(f"influence_radius must be a number or {AUTO!r}")
        influence_radius = auto_radius(mesh.vertices, mesh.vertices[ids])
    return NodeGraph.build(mesh.vertices, ids, influence_radius)


def extract_node_graph(mesh: TriangleMesh, node_count: int, influence_radius: float | str = AUTO) -> NodeGraph:
    """Sample ``node_count`` anchors at evenly spaced PCA ranks and build the graph."""
    _check_node_count(mesh, node_count)
    order = pca_order(mesh.vertices)
    ids = order[even_ranks(mesh.vertex_count, node_count)]
    return _graph_for_ids(mesh, ids, influence_radius)


def extract_nested_graphs(mesh: TriangleMesh, node_counts: Sequence[int],
                          influence_radius: float | str = AUTO) -> list[NodeGraph]:
    """One graph per strictly increasing node count with nested anchor sets.

    The densest level uses evenly spaced PCA ranks; each sparser level takes
    evenly spaced entries of the densest level's anchors, so every level's
    anchors are a subset of the next denser one.
    """
    counts = list(node_counts)
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise NodeCountOutOfRange(f"node counts must be strictly increasing, got {counts}")
    _check_node_count(mesh, counts[-1])
    _check_node_count(mesh, counts[0])
    order = pca_order(mesh.vertices)
    top = order[even_ranks(mesh.vertex_count, counts[-1])]
    return [_graph_for_ids(mesh, top[even_ranks(len(top), n)], influence_radius) for n in counts]


@dataclass(frozen=True, eq=False)
class DeformationParams:
    """Per-node linear parts ``rotations`` (N, 3, 3) and ``translations`` (N, 3)."""

    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        t = np.array(self.translations, dtype=np.float64).reshape(-1, 3)
        if len(r) != len(t):
            raise SizeMismatch(f"{len(r)} rotations but {len(t)} translations")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("deformation parameters must be finite")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotations", r)
        object.__setattr__(self, "translations", t)

    @classmethod
    def identity(cls, node_count: int) -> "DeformationParams":
        return cls(np.tile(np.eye(3), (node_count, 1, 1)), np.zeros((node_count, 3)))

    @classmethod
    def from_array(cls, x: np.ndarray) -> "DeformationParams":
        """Inverse of :meth:`to_array`: rows of 9 row-major matrix entries then 3 translation entries."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 12)
        return cls(x[:, :9].reshape(-1, 3, 3), x[:, 9:])

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.rotations.reshape(-1, 9), self.translations], axis=1)

    def as_float32(self) -> "DeformationParams":
        return DeformationParams.from_array(self.to_array().astype(np.float32).astype(np.float64))

    def __len__(self) -> int:
        return len(self.rotations)

    def __eq__(self, other):
        if not isinstance(other, DeformationParams):
            return NotImplemented
        return np.array_equal(self.rotations, other.rotations) and np.array_equal(self.translations, other.translations)

    __hash__ = None


def _check_sizes(mesh_vertices: int, graph: NodeGraph, params: DeformationParams) -> None:
    if graph.vertex_count != mesh_vertices:
        raise SizeMismatch(f"graph built for {graph.vertex_count} vertices, mesh has {mesh_vertices}")
    if len(params) != graph.node_count:
        raise SizeMismatch(f"{len(params)} node transforms for {graph.node_count} nodes")


def deform_vertices(vertices: np.ndarray, graph: NodeGraph, params: DeformationParams,
                    weight_mode: str = "uniform") -> np.ndarray:
    """Blend ``R_j (v - p_j) + p_j + t_j`` over each vertex's influence set.

    Evaluated as ``v + sum_j w_j [(R_j - I)(v - p_j) + t_j]`` so identity
    transforms reproduce the input bit for bit. ``uniform_sum`` adds the
    extra ``(|I(v)| - 1) v`` the literal unnormalized sum implies.
    """
    W = graph.blend_matrix(weight_mode, vertices if weight_mode == "normalized_distance" else None)
    lin = params.rotations - np.eye(3)
    offset = params.translations - np.einsum("nij,nj->ni", lin, graph.node_positions)
    blended = W @ np.concatenate([lin.reshape(-1, 9), offset], axis=1)
    out = vertices + np.einsum("vij,vj->vi", blended[:, :9].reshape(-1, 3, 3), vertices) + blended[:, 9:]
    if weight_mode == "uniform_sum":
        out += (graph.influence_counts - 1)[:, None] * vertices
    return out


def transform_normals(normals: np.ndarray, graph: NodeGraph, params: DeformationParams,
                      weight_mode: str = "uniform", vertices: np.ndarray | None = None) -> np.ndarray:
    """Blend ``R_j^{-T} n`` over each influence set and re-normalize."""
    normals = np.asarray(normals, dtype=np.float64)
    if len(normals) != graph.vertex_count or len(params) != graph.node_count:
        raise SizeMismatch("normals, graph and params disagree in size")
    det = np.linalg.det(params.rotations)
    bad = np.flatnonzero(np.abs(det) <= 1e-12)
    if bad.size:
        raise SingularRotation(int(bad[0]))
    inv_t = np.transpose(np.linalg.inv(params.rotations), (0, 2, 1)) - np.eye(3)
    W = graph.blend_matrix("uniform" if weight_mode == "uniform_sum" else weight_mode, vertices)
    blended = (W @ inv_t.reshape(-1, 9)).reshape(-1, 3, 3)
    out = normals + np.einsum("vij,vj->vi", blended, normals)
    out /= np.linalg.norm(out, axis=1)[:, None]
    untouched = ~blended.reshape(len(out), 9).any(axis=1)
    out[untouched] = normals[untouched]
    return out


def apply_deformation(mesh: TriangleMesh, graph: NodeGraph, params: DeformationParams,
                      weight_mode: str = "uniform") -> TriangleMesh:
    """Deform ``mesh`` (vertices and, when present, normals); faces are kept."""
    _check_mode(weight_mode)
    _check_sizes(mesh.vertex_count, graph, params)
    v = deform_vertices(mesh.vertices, graph, params, weight_mode)
    n = None
    if mesh.normals is not None:
        n = transform_normals(mesh.normals, graph, params, weight_mode, mesh.vertices)
    return TriangleMesh(v, mesh.faces, n)
