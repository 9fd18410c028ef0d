"""QoE model, frame-dependency tree and the per-chunk frame-adaptation DP.

The DP picks one option per frame (raw, or reconstructed at some ladder
level) to maximize the summed per-frame QoE under a byte budget. States are
kept sparse, keyed by ``(option of the last frame, bytes consumed)``; states
over budget are dropped as soon as they appear and dominated states (same
last option, more bytes, no better QoE) are discarded.
"""

from __future__ import annotations

import heapq
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import RAW_LABEL, FrameSizeTable
from .errors import InfeasibleBudget

RAW = 0
RECONSTRUCTED = 1


@dataclass(frozen=True)
class QoECoefficients:
    mu1: float = 1.0
    mu2: float = 1.0
    mu3: float = 1.0
    latency_penalty: bool = True  # False adds mu3 * l_i as written in the original formula

    def __post_init__(self):
        for name in ("mu1", "mu2", "mu3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class FrameOption:
    frame: int
    kind: int
    level: str | None
    size_bytes: int
    quality_error: float
    decode_latency: float = 0.0

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise ValueError("size_bytes must be positive")
        if self.quality_error < 0 or self.decode_latency < 0:
            raise ValueError("quality_error and decode_latency must be >= 0")
        if self.kind == RAW and self.quality_error != 0:
            raise ValueError("a raw option carries no distortion")
        if self.kind not in (RAW, RECONSTRUCTED):
            raise ValueError(f"unknown option kind {self.kind}")

    @property
    def label(self) -> str:
        return RAW_LABEL if self.kind == RAW else str(self.level)


def qoe(option: FrameOption, prev_quality: float, coeffs: QoECoefficients) -> float:
    """``-mu1 q_i - mu2 |q_i - q_{i-1}| - mu3 l_i`` (``+ mu3 l_i`` without the latency penalty flag)."""
    q = option.quality_error
    latency = coeffs.mu3 * option.decode_latency
    return -coeffs.mu1 * q - coeffs.mu2 * abs(q - prev_quality) + (-latency if coeffs.latency_penalty else latency)


@dataclass
class AdaptationPlan:
    choices: list[FrameOption]
    qoe_per_frame: list[float]
    total_qoe: float
    total_bytes: int
    budget: int | None = None

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.choices]

    def to_jsonl(self, frame_offset: int = 0) -> str:
        rows = []
        for c, value in zip(self.choices, self.qoe_per_frame):
            rows.append(json.dumps({
                "frame": frame_offset + c.frame, "kind": "raw" if c.kind == RAW else "reconstructed",
                "level": c.level, "bytes": c.size_bytes, "q_i": c.quality_error,
                "l_i": c.decode_latency, "qoe_i": value,
            }))
        return "\n".join(rows) + ("\n" if rows else "")


def plan_qoe(choices: Sequence[FrameOption], coeffs: QoECoefficients, prev_quality: float = 0.0) -> list[float]:
    """Per-frame QoE of a fixed sequence of choices."""
    out = []
    prev = prev_quality
    for c in choices:
        out.append(qoe(c, prev, coeffs))
        prev = c.quality_error
    return out


def _total(values: Sequence[float]) -> float:
    total = 0.0
    for v in values:
        total += v
    return total


def _make_plan(options, picks, coeffs, prev_quality, budget) -> AdaptationPlan:
    choices = [options[i][o] for i, o in enumerate(picks)]
    per_frame = plan_qoe(choices, coeffs, prev_quality)
    return AdaptationPlan(choices, per_frame, _total(per_frame), int(sum(c.size_bytes for c in choices)), budget)


def _check_options(options: Sequence[Sequence[FrameOption]]) -> None:
    if not options:
        raise ValueError("a chunk needs at least one frame")
    for i, frame_opts in enumerate(options):
        if not frame_opts:
            raise InfeasibleBudget(f"frame {i} has no options")


def _qoe_table(prev_opts, cur_opts, coeffs, prev_quality) -> np.ndarray:
    """QoE of each current option given each previous option (row -1 = chunk start)."""
    prev_q = [o.quality_error for o in prev_opts] + [prev_quality]
    return np.array([[qoe(o, q, coeffs) for o in cur_opts] for q in prev_q])


# ---------------------------------------------------------------- sparse DP

@dataclass
class _Layer:
    bytes: np.ndarray   # int64 consumed bytes
    value: np.ndarray   # float64 accumulated QoE
    option: np.ndarray  # option ordinal of this frame (-1 for the empty start layer)
    parent: np.ndarray  # index into the previous layer


def _expand(layer: _Layer, lo: int, hi: int, sizes: np.ndarray, table: np.ndarray,
            budget: int | None):
    """Candidate successors of states ``lo:hi`` of ``layer``."""
    b, v, o = layer.bytes[lo:hi], layer.value[lo:hi], layer.option[lo:hi]
    idx = np.arange(lo, hi)
    parts = []
    for k, s in enumerate(sizes):
        nb = b + s
        nv = v + table[o, k]
        keep = slice(None) if budget is None else nb <= budget
        parts.append((nb[keep], nv[keep], np.full(np.count_nonzero(keep) if budget is not None else len(nb), k),
                      idx[keep], o[keep]))
    return parts


def _merge(parts, prune: bool) -> tuple[_Layer, np.ndarray]:
    nb = np.concatenate([p[0] for p in parts])
    nv = np.concatenate([p[1] for p in parts])
    no = np.concatenate([p[2] for p in parts]).astype(np.int64)
    par = np.concatenate([p[3] for p in parts])
    prev_opt = np.concatenate([p[4] for p in parts])
    if len(nb) == 0:
        return _Layer(nb, nv, no, par), prev_opt
    # per key (option, bytes) keep the best value; ties go to the lower previous option
    order = np.lexsort((prev_opt, -nv, nb, no))
    nb, nv, no, par, prev_opt = nb[order], nv[order], no[order], par[order], prev_opt[order]
    first = np.ones(len(nb), dtype=bool)
    first[1:] = (no[1:] != no[:-1]) | (nb[1:] != nb[:-1])
    nb, nv, no, par, prev_opt = nb[first], nv[first], no[first], par[first], prev_opt[first]
    if prune:
        keep = prune_states(nb, nv, no)
        nb, nv, no, par, prev_opt = nb[keep], nv[keep], no[keep], par[keep], prev_opt[keep]
    return _Layer(nb, nv, no, par), prev_opt


def prune_states(state_bytes: np.ndarray, values: np.ndarray, options: np.ndarray,
                 budget: int | None = None) -> np.ndarray:
    """Boolean mask of states that survive bounded and dominance pruning.

    A state is dropped when it exceeds ``budget`` or when another state with
    the same last option uses fewer bytes for at least the same QoE. Input
    keys ``(option, bytes)`` must be unique.
    """
    state_bytes = np.asarray(state_bytes)
    values = np.asarray(values, dtype=np.float64)
    options = np.asarray(options)
    keep = np.ones(len(state_bytes), dtype=bool) if budget is None else state_bytes <= budget
    for k in np.unique(options):
        idx = np.flatnonzero((options == k) & keep)
        if len(idx) < 2:
            continue
        idx = idx[np.argsort(state_bytes[idx], kind="stable")]
        best_before = np.maximum.accumulate(values[idx])
        dominated = np.zeros(len(idx), dtype=bool)
        dominated[1:] = values[idx[1:]] <= best_before[:-1]
        keep[idx[dominated]] = False
    return keep


def optimize_chunk(options: Sequence[Sequence[FrameOption]], budget: int, coeffs: QoECoefficients,
                   prev_quality: float = 0.0, prune: bool = True, workers: int = 1) -> AdaptationPlan:
    """Maximize total QoE over per-frame option choices with total bytes <= ``budget``.

    ``options[i]`` lists the choices for frame ``i``; its order defines the
    option ordinal used for tie-breaking (lower bytes first, then lower
    ordinal). ``prev_quality`` is the distortion of the frame before the
    chunk. With ``prune=False`` every reachable state is kept and the budget
    is only applied at the end. ``workers > 1`` expands each layer's states
    in parallel slices; the merge is order independent.
    """
    _check_options(options)
    start = _Layer(np.zeros(1, np.int64), np.zeros(1), np.full(1, -1, np.int64), np.full(1, -1, np.int64))
    layers = [start]
    prev_opts: Sequence[FrameOption] = ()
    bound = budget if prune else None
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for frame_opts in options:
            table = _qoe_table(prev_opts, frame_opts, coeffs, prev_quality)
            sizes = np.array([o.size_bytes for o in frame_opts], dtype=np.int64)
            layer = layers[-1]
            n = len(layer.bytes)
            if pool is not None and n >= 2 * workers:
                cuts = np.linspace(0, n, workers + 1).astype(int)
                jobs = [pool.submit(_expand, layer, lo, hi, sizes, table, bound) for lo, hi in zip(cuts, cuts[1:])]
                parts = [p for job in jobs for p in job.result()]
            else:
                parts = _expand(layer, 0, n, sizes, table, bound)
            nxt, _ = _merge(parts, prune)
            if len(nxt.bytes) == 0:
                raise InfeasibleBudget(f"no option combination fits {budget} bytes")
            layers.append(nxt)
            prev_opts = frame_opts
    finally:
        if pool is not None:
            pool.shutdown()
    last = layers[-1]
    ok = np.flatnonzero(last.bytes <= budget)
    if len(ok) == 0:
        raise InfeasibleBudget(f"no option combination fits {budget} bytes")
    best = ok[np.lexsort((last.option[ok], last.bytes[ok], -last.value[ok]))[0]]
    picks = []
    for layer in reversed(layers[1:]):
        picks.append(int(layer.option[best]))
        best = layer.parent[best]
    picks.reverse()
    return _make_plan(options, picks, coeffs, prev_quality, budget)


def optimize_chunk_dense(options: Sequence[Sequence[FrameOption]], budget: int, coeffs: QoECoefficients,
                         prev_quality: float = 0.0) -> AdaptationPlan:
    """Reference DP over a dense ``[option][bytes 0..budget]`` table with no pruning."""
    _check_options(options)
    width = int(budget) + 1
    if width <= 0:
        raise InfeasibleBudget(f"negative budget {budget}")
    prev = np.full((1, width), -np.inf)
    prev[0, 0] = 0.0
    prev_opts: Sequence[FrameOption] = ()
    back = []
    for frame_opts in options:
        table = _qoe_table(prev_opts, frame_opts, coeffs, prev_quality)
        rows = table[:-1] if len(prev_opts) else table[-1:]
        cur = np.full((len(frame_opts), width), -np.inf)
        arg = np.zeros((len(frame_opts), width), dtype=np.int16)
        for k, o in enumerate(frame_opts):
            s = o.size_bytes
            if s >= width:
                continue
            dst = cur[k, s:]
            for p in range(len(rows)):
                cand = prev[p, :width - s] + rows[p, k]
                better = cand > dst
                dst[better] = cand[better]
                arg[k, s:][better] = p
        back.append(arg)
        prev = cur
        prev_opts = frame_opts
    if not np.isfinite(prev).any():
        raise InfeasibleBudget(f"no option combination fits {budget} bytes")
    best_value = prev.max()
    # lower bytes first, then lower option ordinal
    ks, bs = np.nonzero(prev == best_value)
    pick = np.lexsort((ks, bs))[0]
    k, b = int(ks[pick]), int(bs[pick])
    picks = []
    for i in range(len(options) - 1, -1, -1):
        picks.append(k)
        p = int(back[i][k, b])
        b -= options[i][k].size_bytes
        k = p
    picks.reverse()
    return _make_plan(options, picks, coeffs, prev_quality, budget)


# ---------------------------------------------------------------- dependency tree

@dataclass
class TreeNode:
    """Interval ``[start, end]`` (0-based, inclusive) depending on its first frame."""

    start: int
    end: int
    head_bytes: int
    chain_bytes: int
    error: float
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def cost(self) -> int:
        return self.head_bytes + self.chain_bytes

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class FrameDependencyTree:
    root: TreeNode
    frame_count: int

    def leaves(self) -> list[TreeNode]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack += [node.right, node.left]
        return out

    def level(self, depth: int) -> list[TreeNode]:
        nodes = [self.root]
        for _ in range(depth):
            nodes = [c for n in nodes for c in ((n.left, n.right) if not n.is_leaf else (n,))]
        return nodes


def build_dependency_tree(frame_count: int, size_table: FrameSizeTable, error_table: Sequence[float],
                          level: str | None = None) -> FrameDependencyTree:
    """Balanced segment tree over frames ``0..n-1``.

    Each interval is annotated with its head's raw bytes, the P-frame bytes
    of every later frame in it at ``level`` (default: the sparsest level) and
    the summed per-frame error of those dependent frames.
    """
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    if len(size_table) < frame_count or len(error_table) < frame_count:
        raise ValueError("size and error tables must cover every frame")
    label = level or next(iter(size_table.p))
    p = np.asarray(size_table.p[label][:frame_count], dtype=np.int64)
    err = np.asarray(error_table[:frame_count], dtype=np.float64)
    p_cum = np.concatenate([[0], np.cumsum(p)])
    e_cum = np.concatenate([[0.0], np.cumsum(err)])

    def build(lo: int, hi: int) -> TreeNode:
        node = TreeNode(lo, hi, int(size_table.raw[lo]), int(p_cum[hi + 1] - p_cum[lo + 1]),
                        float(e_cum[hi + 1] - e_cum[lo + 1]))
        if lo < hi:
            mid = (lo + hi) // 2
            node.left, node.right = build(lo, mid), build(mid + 1, hi)
        return node

    return FrameDependencyTree(build(0, frame_count - 1), frame_count)


def select_dependency_depth(tree: FrameDependencyTree, available_bandwidth: float) -> list[tuple[int, int]]:
    """Refine the tree top-down while the cut still fits the bandwidth.

    Starting from the root (one I-frame, the cheapest cut) the interval with
    the largest accumulated error is split first; a split that would exceed
    ``available_bandwidth`` bytes leaves that interval whole. Returns the
    chosen ``(start, end)`` intervals in frame order; each start is an
    I-frame.
    """
    if not available_bandwidth > 0:
        raise InfeasibleBudget(f"bandwidth must be positive, got {available_bandwidth}")
    root = tree.root
    if root.cost > available_bandwidth:
        raise InfeasibleBudget(f"even a single dependency chain needs {root.cost} bytes > {available_bandwidth:g}")
    total = root.cost
    cut = []
    heap = [(-root.error, root.start, root)]
    while heap:
        _, _, node = heapq.heappop(heap)
        if node.is_leaf:
            cut.append(node)
            continue
        split_total = total - node.cost + node.left.cost + node.right.cost
        if split_total <= available_bandwidth:
            total = split_total
            for child in (node.left, node.right):
                heapq.heappush(heap, (-child.error, child.start, child))
        else:
            cut.append(node)
    return sorted((n.start, n.end) for n in cut)


# ---------------------------------------------------------------- option tables

def build_frame_options(size_table: FrameSizeTable, errors: dict[str, Sequence[float]],
                        latencies: dict[str, float], heads: Sequence[int] = (0,)) -> list[list[FrameOption]]:
    """Per-frame option lists: raw first, then each level in ladder order.

    Frames listed in ``heads`` (I-frame positions) only get the raw option.
    """
    heads = set(heads)
    out = []
    for t in range(len(size_table)):
        opts = [FrameOption(t, RAW, None, size_table.raw[t], 0.0, 0.0)]
        if t not in heads:
            for label in size_table.p:
                opts.append(FrameOption(t, RECONSTRUCTED, label, size_table.p[label][t],
                                        float(errors[label][t]), float(latencies[label])))
        out.append(opts)
    return out
