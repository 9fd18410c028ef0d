"""Per-node affine registration between consecutive frames.

The encoder fits one ``(R_j, t_j)`` per control node by minimizing

    lambda_align * E_align + lambda_rot * E_rot + lambda_reg * E_reg

with a damped Gauss-Newton (Levenberg) iteration started from identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .deform_graph import DeformationParams, NodeGraph, deform_vertices
from .errors import EmptyMesh, NonFiniteEnergy, SizeMismatch
from .mesh_core import TriangleMesh

# column index pairs for the orthogonality residuals of the rigidity penalty
_COLUMN_PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class EnergyWeights:
    lambda_align: float = 1.0
    lambda_rot: float = 1.0
    lambda_reg: float = 10.0

    def __post_init__(self):
        vals = (self.lambda_align, self.lambda_rot, self.lambda_reg)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"energy weights must be finite and >= 0, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one energy weight must be positive")


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-6
    max_iters: int = 50
    initial_damping: float = 1e-4
    weight_mode: str = "uniform"
    linear_solver: str = "auto"  # auto | dense | sparse | cg
    dense_max_nodes: int = 1000


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Source vertex indices paired with target positions and confidences."""

    source_indices: np.ndarray
    targets: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.source_indices, dtype=np.int64).ravel()
        tgt = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        conf = np.asarray(self.confidences, dtype=np.float64).ravel()
        if not (len(idx) == len(tgt) == len(conf)):
            raise SizeMismatch("correspondence arrays differ in length")
        if not np.all(np.isfinite(conf)) or np.any((conf < 0) | (conf > 1)):
            raise ValueError("confidences must be finite and within [0, 1]")
        object.__setattr__(self, "source_indices", idx)
        object.__setattr__(self, "targets", tgt)
        object.__setattr__(self, "confidences", conf)

    def __len__(self) -> int:
        return len(self.source_indices)

    @property
    def pairs(self) -> list[tuple[int, np.ndarray, float]]:
        return list(zip(self.source_indices.tolist(), self.targets, self.confidences.tolist()))


@dataclass
class SolveReport:
    final_energy: float
    term_energies: tuple[float, float, float]
    iterations: int
    converged: bool
    initial_energy: float = 0.0
    energy_history: list[float] = field(default_factory=list)


def compute_correspondences(source: TriangleMesh, target: TriangleMesh) -> CorrespondenceSet:
    """Index-aligned pairs for identical topology, nearest neighbours otherwise.

    Nearest-neighbour confidences decay as ``exp(-(d / s)^2)`` with ``s`` one
    tenth of the target's bounding-box diagonal.
    """
    if source.vertex_count == 0 or target.vertex_count == 0:
        raise EmptyMesh("correspondences need non-empty meshes")
    n = source.vertex_count
    if source.same_topology(target):
        return CorrespondenceSet(np.arange(n), target.vertices, np.ones(n))
    return _nearest_correspondences(source.vertices, target)


def _nearest_correspondences(points: np.ndarray, target: TriangleMesh) -> CorrespondenceSet:
    d, j = cKDTree(target.vertices).query(points, k=1)
    scale = 0.1 * target.bbox_diagonal()
    conf = np.ones(len(points)) if scale == 0 else np.exp(-((d / scale) ** 2))
    return CorrespondenceSet(np.arange(len(points)), target.vertices[j], conf)


# ---------------------------------------------------------------- energies

def energy_alignment(source: TriangleMesh, graph: NodeGraph, params: DeformationParams,
                     corr: CorrespondenceSet, weight_mode: str = "uniform") -> float:
    """Confidence-weighted sum of squared distances from deformed source to targets."""
    if graph.vertex_count != source.vertex_count or len(params) != graph.node_count:
        raise SizeMismatch("source, graph and params disagree in size")
    if len(corr) and corr.source_indices.max() >= source.vertex_count:
        raise SizeMismatch("correspondence index out of range")
    deformed = deform_vertices(source.vertices, graph, params, weight_mode)
    diff = deformed[corr.source_indices] - corr.targets
    return float(np.sum(corr.confidences * np.sum(diff * diff, axis=1)))


def rotation_residuals(params: DeformationParams) -> np.ndarray:
    """(N, 6) column orthogonality and unit-length residuals."""
    A = params.rotations
    cols = np.transpose(A, (0, 2, 1))  # cols[j, a] is column a of A_j
    gram = np.einsum("nai,nbi->nab", cols, cols)
    off = np.stack([gram[:, a, b] for a, b in _COLUMN_PAIRS], axis=1)
    diag = np.stack([gram[:, a, a] - 1.0 for a in range(3)], axis=1)
    return np.concatenate([off, diag], axis=1)


def energy_rotation(params: DeformationParams) -> float:
    """Sum over nodes of ``sum_{a<b} (c_a . c_b)^2 + sum_a (c_a . c_a - 1)^2``."""
    r = rotation_residuals(params)
    return float(np.sum(r * r))


def _directed_edges(graph: NodeGraph) -> np.ndarray:
    e = graph.edges
    return np.concatenate([e, e[:, ::-1]]) if len(e) else e.reshape(0, 2)


def regularization_residuals(graph: NodeGraph, params: DeformationParams) -> np.ndarray:
    """(2E, 3) edge residuals ``R_j (p_k - p_j) + p_j + t_j - (p_k + t_k)`` in both directions."""
    e = _directed_edges(graph)
    if len(e) == 0:
        return np.zeros((0, 3))
    j, k = e[:, 0], e[:, 1]
    p, A, t = graph.node_positions, params.rotations, params.translations
    # same residual written as (R_j - I)(p_k - p_j) + t_j - t_k, exact at identity
    return np.einsum("eij,ej->ei", A[j] - np.eye(3), p[k] - p[j]) + (t[j] - t[k])


def energy_regularization(graph: NodeGraph, params: DeformationParams) -> float:
    r = regularization_residuals(graph, params)
    return float(np.sum(r * r))


# ---------------------------------------------------------------- jacobians

def _alignment_jacobian(source_vertices: np.ndarray, graph: NodeGraph, corr: CorrespondenceSet,
                        weight_mode: str) -> sp.csr_matrix:
    """d(deformed[src] - target)/dx scaled by sqrt(confidence); x is 12 values per node."""
    W = graph.blend_matrix(weight_mode, source_vertices)
    W = W[corr.source_indices].tocoo()
    scale = np.sqrt(corr.confidences)[W.row]
    pair, node, w = W.row, W.col, W.data * scale
    d = source_vertices[corr.source_indices[pair]] - graph.node_positions[node]
    rows, cols, vals = [], [], []
    for r in range(3):
        for c in range(3):
            rows.append(3 * pair + r)
            cols.append(12 * node + 3 * r + c)
            vals.append(w * d[:, c])
        rows.append(3 * pair + r)
        cols.append(12 * node + 9 + r)
        vals.append(w)
    shape = (3 * len(corr), 12 * graph.node_count)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)


def _rotation_jacobian(params: DeformationParams) -> sp.csr_matrix:
    A = params.rotations
    n = len(A)
    node = np.arange(n)
    rows, cols, vals = [], [], []
    for q, (a, b) in enumerate(_COLUMN_PAIRS):
        for r in range(3):
            rows += [6 * node + q, 6 * node + q]
            cols += [12 * node + 3 * r + a, 12 * node + 3 * r + b]
            vals += [A[:, r, b], A[:, r, a]]
    for a in range(3):
        for r in range(3):
            rows.append(6 * node + 3 + a)
            cols.append(12 * node + 3 * r + a)
            vals.append(2.0 * A[:, r, a])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(6 * n, 12 * n))


def _regularization_jacobian(graph: NodeGraph) -> sp.csr_matrix:
    e = _directed_edges(graph)
    n = graph.node_count
    if len(e) == 0:
        return sp.csr_matrix((0, 12 * n))
    j, k = e[:, 0], e[:, 1]
    d = graph.node_positions[k] - graph.node_positions[j]
    ei = np.arange(len(e))
    rows, cols, vals = [], [], []
    for r in range(3):
        for c in range(3):
            rows.append(3 * ei + r)
            cols.append(12 * j + 3 * r + c)
            vals.append(d[:, c])
        rows += [3 * ei + r, 3 * ei + r]
        cols += [12 * j + 9 + r, 12 * k + 9 + r]
        vals += [np.ones(len(e)), -np.ones(len(e))]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * len(e), 12 * n))


def energy_gradients(source: TriangleMesh, graph: NodeGraph, params: DeformationParams,
                     corr: CorrespondenceSet, weight_mode: str = "uniform") -> dict[str, np.ndarray]:
    """Analytic gradients of the unweighted energies, flattened as ``params.to_array().ravel()``."""
    v = source.vertices
    deformed = deform_vertices(v, graph, params, weight_mode)
    r_align = (np.sqrt(corr.confidences)[:, None] * (deformed[corr.source_indices] - corr.targets)).ravel()
    return {
        "align": 2.0 * (_alignment_jacobian(v, graph, corr, weight_mode).T @ r_align),
        "rot": 2.0 * (_rotation_jacobian(params).T @ rotation_residuals(params).ravel()),
        "reg": 2.0 * (_regularization_jacobian(graph).T @ regularization_residuals(graph, params).ravel()),
    }


# ---------------------------------------------------------------- solver

class _Problem:
    def __init__(self, source: TriangleMesh, graph: NodeGraph, corr: CorrespondenceSet,
                 weights: EnergyWeights, weight_mode: str):
        self.v = source.vertices
        self.graph = graph
        self.corr = corr
        self.mode = weight_mode
        self.sa = math.sqrt(weights.lambda_align)
        self.sr = math.sqrt(weights.lambda_rot)
        self.sg = math.sqrt(weights.lambda_reg)
        self.sqrt_conf = np.sqrt(corr.confidences)[:, None]
        # alignment and regularization residuals are linear in the unknowns
        self.J_align = self.sa * _alignment_jacobian(self.v, graph, corr, weight_mode)
        self.J_reg = self.sg * _regularization_jacobian(graph)
        self.J_lin = sp.vstack([self.J_align, self.J_reg]).tocsr()
        self.H_lin = (self.J_lin.T @ self.J_lin).tocsc()

    def residuals(self, params: DeformationParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        deformed = deform_vertices(self.v, self.graph, params, self.mode)
        ra = self.sa * (self.sqrt_conf * (deformed[self.corr.source_indices] - self.corr.targets)).ravel()
        rr = self.sr * rotation_residuals(params).ravel()
        rg = self.sg * regularization_residuals(self.graph, params).ravel()
        return ra, rr, rg

    def energy(self, params: DeformationParams) -> float:
        return float(sum(np.dot(r, r) for r in self.residuals(params)))

    def normal_equations(self, params: DeformationParams):
        ra, rr, rg = self.residuals(params)
        J_rot = self.sr * _rotation_jacobian(params)
        H = self.H_lin + (J_rot.T @ J_rot).tocsc()
        g = self.J_lin.T @ np.concatenate([ra, rg]) + J_rot.T @ rr
        return H, g


def _solve_damped(H: sp.csc_matrix, g: np.ndarray, damping: float, opts: SolverOptions, node_count: int) -> np.ndarray:
    method = opts.linear_solver
    if method == "auto":
        method = "dense" if node_count <= opts.dense_max_nodes else "sparse"
    if method == "dense":
        A = H.toarray()
        A[np.diag_indices_from(A)] += damping
        try:
            return -scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, check_finite=False), g, check_finite=False)
        except np.linalg.LinAlgError:
            return -scipy.linalg.solve(A, g, assume_a="sym")
    A = (H + damping * sp.identity(H.shape[0], format="csc")).tocsc()
    if method == "sparse":
        return -spla.splu(A).solve(g)
    if method == "cg":
        x, _ = spla.cg(A, -g, rtol=1e-12, maxiter=10 * A.shape[0])
        return x
    raise ValueError(f"unknown linear solver {opts.linear_solver!r}")


def _term_energies(source, graph, params, corr, mode) -> tuple[float, float, float]:
    return (
        energy_alignment(source, graph, params, corr, mode),
        energy_rotation(params),
        energy_regularization(graph, params),
    )


def _gauss_newton(problem: _Problem, start: DeformationParams, opts: SolverOptions):
    params = start
    energy = problem.energy(params)
    if not math.isfinite(energy):
        raise NonFiniteEnergy("initial energy is not finite")
    initial = energy
    history = [energy]
    damping = opts.initial_damping
    floor = 1e-26 * max(1.0, initial)
    iterations = 0
    converged = energy <= floor
    while not converged and iterations < opts.max_iters:
        iterations += 1
        H, g = problem.normal_equations(params)
        step = _solve_damped(H, g, damping, opts, problem.graph.node_count)
        if not np.all(np.isfinite(step)):
            raise NonFiniteEnergy(f"non-finite step at iteration {iterations}")
        trial = DeformationParams.from_array(params.to_array() + step.reshape(-1, 12))
        trial_energy = problem.energy(trial)
        if not math.isfinite(trial_energy):
            raise NonFiniteEnergy(f"energy diverged at iteration {iterations}")
        if trial_energy <= energy:
            decrease = energy - trial_energy
            params, energy = trial, trial_energy
            damping = max(damping / 10.0, 1e-15)
            history.append(energy)
            if energy <= floor or decrease <= opts.tol * history[-2]:
                converged = True
        else:
            damping *= 10.0
            history.append(energy)
            if damping > 1e12:
                # no descent direction left at working precision
                converged = True
    return params, energy, initial, iterations, converged, history


def solve_deformation(source: TriangleMesh, graph: NodeGraph, target: TriangleMesh,
                      weights: EnergyWeights | None = None,
                      opts: SolverOptions | None = None) -> tuple[DeformationParams, SolveReport]:
    """Fit per-node transforms deforming ``source`` onto ``target``.

    ``graph`` is rebased onto ``source`` first. For differing topologies the
    nearest-neighbour correspondences are refreshed once from the deformed
    source and the solve is repeated from the first result.
    """
    weights = weights or EnergyWeights()
    opts = opts or SolverOptions()
    if graph.vertex_count != source.vertex_count:
        raise SizeMismatch(f"graph built for {graph.vertex_count} vertices, source has {source.vertex_count}")
    graph = graph.rebased(source)
    corr = compute_correspondences(source, target)
    problem = _Problem(source, graph, corr, weights, opts.weight_mode)
    params, energy, initial, iters, converged, history = _gauss_newton(
        problem, DeformationParams.identity(graph.node_count), opts
    )
    if not source.same_topology(target):
        moved = deform_vertices(source.vertices, graph, params, opts.weight_mode)
        corr = _nearest_correspondences(moved, target)
        problem = _Problem(source, graph, corr, weights, opts.weight_mode)
        params, energy, _, more, converged, tail = _gauss_newton(problem, params, opts)
        iters += more
        history += tail[1:]
    report = SolveReport(
        final_energy=energy,
        term_energies=_term_energies(source, graph, params, corr, opts.weight_mode),
        iterations=iters,
        converged=converged,
        initial_energy=initial,
        energy_history=history,
    )
    return params, report
