"""Trace-driven chunk-level streaming simulator and decode-time profiling.

Time is kept as exact ``Fraction`` values so the playback clock adds up
exactly: total time = startup delay + playback + rebuffering.

Playback model: the stream is live. Chunk ``c`` becomes available at
``c * D`` (``D`` = GoF duration) and the client downloads chunks one at a
time, each as soon as it is available and the previous one is decoded.
Playback starts after a fixed startup delay; a chunk that is not decoded by
its scheduled play time stalls playback until it is.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import abr
from .codec import EncodedGoF, FrameSizeTable, decode_gof, measure_sizes
from .deform_graph import AUTO, DeformationParams, apply_deformation, extract_node_graph
from .errors import InfeasibleBudget, MalformedRow, NonMonotonicTime
from .mesh_core import MeshSequence, TriangleMesh
from .metrics import sequence_hausdorff


# ---------------------------------------------------------------- traces

@dataclass(frozen=True)
class BandwidthTrace:
    """Piecewise-constant bandwidth: each sample holds until the next one.

    The first sample also holds before its timestamp and the last one holds
    forever.
    """

    times: tuple[float, ...]
    bandwidths: tuple[float, ...]

    def __post_init__(self):
        if len(self.times) == 0 or len(self.times) != len(self.bandwidths):
            raise ValueError("a trace needs matching, non-empty time and bandwidth lists")
        for i in range(1, len(self.times)):
            if not self.times[i] > self.times[i - 1]:
                raise NonMonotonicTime(i + 1)
        for b in self.bandwidths:
            if not math.isfinite(b) or b < 0:
                raise ValueError(f"bandwidth must be finite and >= 0, got {b}")
        for t in self.times:
            if not math.isfinite(t):
                raise ValueError("trace times must be finite")
        object.__setattr__(self, "_t", [Fraction(t) for t in self.times])
        object.__setattr__(self, "_b", [Fraction(b) for b in self.bandwidths])

    @classmethod
    def constant(cls, bandwidth_bps: float) -> "BandwidthTrace":
        return cls((0.0,), (float(bandwidth_bps),))

    def __len__(self) -> int:
        return len(self.times)

    def scaled(self, factor: float) -> "BandwidthTrace":
        return BandwidthTrace(self.times, tuple(b * factor for b in self.bandwidths))

    def _segment(self, t: Fraction) -> int:
        return max(bisect.bisect_right(self._t, t) - 1, 0)

    def rate_at(self, t) -> float:
        return self.bandwidths[self._segment(Fraction(t))]

    def integrate(self, t0, t1) -> Fraction:
        """Bits delivered over ``[t0, t1]``."""
        t0, t1 = Fraction(t0), Fraction(t1)
        if t1 <= t0:
            return Fraction(0)
        total = Fraction(0)
        i = self._segment(t0)
        t = t0
        while t < t1:
            seg_end = self._t[i + 1] if i + 1 < len(self._t) else t1
            end = min(seg_end, t1)
            if end > t:
                total += self._b[i] * (end - t)
                t = end
            i += 1 if i + 1 < len(self._t) else 0
        return total

    def time_to_send(self, start, bits) -> Fraction | None:
        """Seconds needed to deliver ``bits`` starting at ``start``; None if it never completes."""
        t = Fraction(start)
        left = Fraction(bits)
        if left <= 0:
            return Fraction(0)
        i = self._segment(t)
        while True:
            rate = self._b[i]
            seg_end = self._t[i + 1] if i + 1 < len(self._t) else None
            if seg_end is None:
                if rate == 0:
                    return None
                return t + left / rate - Fraction(start)
            span = seg_end - t
            if span > 0 and rate * span >= left:
                return t + left / rate - Fraction(start)
            if span > 0:
                left -= rate * span
                t = seg_end
            i += 1


def load_trace(path: str | os.PathLike) -> BandwidthTrace:
    """Read ``time_s,bandwidth_bps`` rows; a non-numeric first row is taken as a header."""
    times, rates = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].strip().startswith("#"):
                continue
            if len(row) != 2:
                raise MalformedRow(lineno, f"expected 2 columns, got {len(row)}")
            try:
                t, b = float(row[0]), float(row[1])
            except ValueError:
                if lineno == 1 and not times:
                    continue
                raise MalformedRow(lineno, "non-numeric value") from None
            if not (math.isfinite(t) and math.isfinite(b)) or b < 0:
                raise MalformedRow(lineno, "time and bandwidth must be finite, bandwidth >= 0")
            if times and t <= times[-1]:
                raise NonMonotonicTime(lineno)
            times.append(t)
            rates.append(b)
    if not times:
        raise MalformedRow(0, "trace has no samples")
    return BandwidthTrace(tuple(times), tuple(rates))


# ---------------------------------------------------------------- decode time

@dataclass(frozen=True)
class DecodeTimeModel:
    alpha: float  # seconds per node
    beta: float   # seconds
    fit_r2: float = 1.0
    node_counts: tuple[int, ...] = ()
    seconds: tuple[float, ...] = ()  # measurements behind the fit, if any

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ValueError("alpha and beta must be >= 0")

    def predict(self, node_count: int) -> float:
        return self.alpha * node_count + self.beta

    @classmethod
    def fit(cls, node_counts: Sequence[float], seconds: Sequence[float]) -> "DecodeTimeModel":
        """Least-squares line constrained to alpha, beta >= 0."""
        x = np.asarray(node_counts, dtype=np.float64)
        y = np.asarray(seconds, dtype=np.float64)
        if len(np.unique(x)) < 2:
            return cls(0.0, max(float(y.mean()), 0.0), 1.0, tuple(node_counts), tuple(float(v) for v in y))
        alpha, beta = np.polyfit(x, y, 1)
        if alpha < 0:
            alpha, beta = 0.0, float(y.mean())
        elif beta < 0:
            alpha, beta = float(x @ y / (x @ x)), 0.0
        beta = max(beta, 0.0)
        resid = y - (alpha * x + beta)
        ss_tot = float(((y - y.mean()) ** 2).sum())
        r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
        return cls(float(alpha), float(beta), r2, tuple(node_counts), tuple(float(v) for v in y))


def _timing_params(node_count: int, rng: np.random.Generator) -> DeformationParams:
    rot = np.eye(3) + 0.01 * rng.standard_normal((node_count, 3, 3))
    return DeformationParams(rot, 0.01 * rng.standard_normal((node_count, 3)))


def profile_decode_time(mesh: TriangleMesh, node_counts: Sequence[int], repetitions: int = 5,
                        influence_radius: float | str = AUTO, weight_mode: str = "uniform",
                        measure: Callable[[int], float] | None = None,
                        clock: Callable[[], float] = time.perf_counter) -> DecodeTimeModel:
    """Time one deformation decode per node count and fit a line.

    One influence radius is shared by all counts (by default the automatic
    radius of the smallest count), so every added node adds work. Each count
    reports the median of ``repetitions`` runs. ``measure(node_count)`` can
    replace the wall-clock measurement entirely; the raw timings are kept on
    the returned model.
    """
    counts = [int(n) for n in node_counts]
    if not counts:
        raise ValueError("need at least one node count")
    for n in counts:
        if not 1 <= n <= mesh.vertex_count:
            raise ValueError(f"node count {n} outside [1, {mesh.vertex_count}]")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if measure is None:
        if influence_radius == AUTO:
            base = extract_node_graph(mesh, min(counts))
            radius = base.influence_radius
        else:
            radius = float(influence_radius)
        rng = np.random.default_rng(0)

        def measure(n: int) -> float:
            graph = extract_node_graph(mesh, n, radius)
            params = _timing_params(n, rng)
            graph.blend_matrix(weight_mode, mesh.vertices)  # warm the cache outside the timer
            runs = []
            for _ in range(repetitions):
                t0 = clock()
                apply_deformation(mesh, graph, params, weight_mode)
                runs.append(clock() - t0)
            return float(statistics.median(runs))

    seconds = [float(measure(n)) for n in counts]
    return DecodeTimeModel.fit(counts, seconds)


# ---------------------------------------------------------------- stream profile

@dataclass
class ChunkProfile:
    """Sizes and per-level distortion of one encoded GoF."""

    sizes: FrameSizeTable
    errors: dict[str, list[float]]
    node_counts: dict[str, int]

    @property
    def frame_count(self) -> int:
        return len(self.sizes)

    @property
    def overhead_bytes(self) -> int:
        """Node graphs shipped with the I-frame, paid by every chunk."""
        return int(sum(self.sizes.graph_bytes.values()))

    def options(self, decode_model: DecodeTimeModel, heads: Sequence[int] = (0,)) -> list[list[abr.FrameOption]]:
        latencies = {label: decode_model.predict(n) for label, n in self.node_counts.items()}
        return abr.build_frame_options(self.sizes, self.errors, latencies, heads)


def profile_stream(gofs: Sequence[EncodedGoF], reference: MeshSequence | Sequence[TriangleMesh],
                   weight_mode: str = "uniform") -> list[ChunkProfile]:
    """Measure sizes and per-frame Hausdorff of every level's decode chain.

    The error of a level at frame ``t`` is that of decoding frames 1..t all
    at that level from the I-frame.
    """
    frames = list(reference)
    out = []
    start = 0
    for enc in gofs:
        chunk = frames[start:start + enc.gof_length]
        if len(chunk) != enc.gof_length:
            raise ValueError("reference sequence is shorter than the stream")
        sizes = measure_sizes(enc, chunk)
        errors = {}
        for label in enc.ladder.labels:
            decoded = decode_gof(enc, [label] * enc.gof_length, weight_mode)
            errors[label] = sequence_hausdorff(decoded.frames, chunk)
            errors[label][0] = 0.0
        out.append(ChunkProfile(sizes, errors, {lv.label: lv.node_count for lv in enc.ladder.levels}))
        start += enc.gof_length
    return out


# ---------------------------------------------------------------- simulation

@dataclass
class ChunkRecord:
    index: int
    available_s: Fraction
    budget_bytes: int
    heads: list[int]
    labels: list[str]
    bytes: int
    overrun: bool
    delivered: bool
    transmit_s: Fraction | None
    decode_s: Fraction
    ready_s: Fraction | None
    play_s: Fraction | None
    rebuffer_s: Fraction
    hausdorff: list[float]
    total_qoe: float
    plan: abr.AdaptationPlan | None = None

    def row(self) -> dict:
        def f(x):
            return None if x is None else float(x)
        return {
            "chunk": self.index, "available_s": f(self.available_s), "budget_bytes": self.budget_bytes,
            "bytes": self.bytes, "overrun": self.overrun, "delivered": self.delivered,
            "transmit_s": f(self.transmit_s), "decode_s": f(self.decode_s), "ready_s": f(self.ready_s),
            "play_s": f(self.play_s), "rebuffer_s": f(self.rebuffer_s),
            "mean_hausdorff": float(np.mean(self.hausdorff)) if self.hausdorff else None,
            "total_qoe": self.total_qoe,
        }


@dataclass
class SimReport:
    chunks: list[ChunkRecord]
    chunk_duration_s: Fraction
    startup_delay_s: Fraction
    playback_s: Fraction
    rebuffer_s: Fraction
    total_time_s: Fraction
    overruns: list[int] = field(default_factory=list)

    @property
    def total_rebuffer_s(self) -> float:
        return float(self.rebuffer_s)

    @property
    def hausdorff(self) -> list[float]:
        return [h for c in self.chunks for h in c.hausdorff]

    @property
    def mean_hausdorff(self) -> float:
        h = self.hausdorff
        return float(np.mean(h)) if h else 0.0

    @property
    def median_hausdorff(self) -> float:
        h = self.hausdorff
        return float(np.median(h)) if h else 0.0

    @property
    def mean_latency_s(self) -> float:
        """Mean time from a chunk becoming available to it being decoded."""
        done = [c.ready_s - c.available_s for c in self.chunks if c.delivered]
        return float(sum(done, Fraction(0)) / len(done)) if done else math.inf

    def aggregates(self) -> dict:
        return {
            "chunks": len(self.chunks), "delivered": sum(c.delivered for c in self.chunks),
            "total_rebuffer_s": self.total_rebuffer_s, "mean_hausdorff": self.mean_hausdorff,
            "median_hausdorff": self.median_hausdorff, "mean_latency_s": self.mean_latency_s,
            "startup_delay_s": float(self.startup_delay_s), "playback_s": float(self.playback_s),
            "total_time_s": float(self.total_time_s), "overruns": list(self.overruns),
        }

    def to_json(self) -> str:
        rows = []
        for c in self.chunks:
            row = c.row()
            row.update(heads=c.heads, labels=c.labels, hausdorff=c.hausdorff)
            rows.append(row)
        return json.dumps({"aggregates": self.aggregates(), "chunks": rows}, indent=2)

    def plans_jsonl(self) -> str:
        out, offset = [], 0
        for c in self.chunks:
            if c.plan is not None:
                out.append(c.plan.to_jsonl(offset))
                offset += len(c.plan.choices)
        return "".join(out)

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = [c.row() for c in self.chunks]
        fields = list(rows[0]) if rows else ["chunk"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()


def _fallback_plan(profile: ChunkProfile, decode_model: DecodeTimeModel, coeffs) -> abr.AdaptationPlan:
    """Raw first frame, lowest ladder level for the rest."""
    opts = profile.options(decode_model, heads=(0,))
    picks = [o[0] if len(o) == 1 else o[1] for o in opts]
    per_frame = abr.plan_qoe(picks, coeffs)
    return abr.AdaptationPlan(picks, per_frame, float(sum(per_frame)), sum(p.size_bytes for p in picks))


def plan_chunk(profile: ChunkProfile, budget: int, coeffs: abr.QoECoefficients,
               decode_model: DecodeTimeModel, workers: int = 1) -> tuple[abr.AdaptationPlan, list[int], bool]:
    """I-frame placement, then per-frame options. Returns (plan, heads, overrun).

    The graph overhead is taken off ``budget`` before planning.
    """
    lowest = next(iter(profile.sizes.p))
    budget -= profile.overhead_bytes
    try:
        tree = abr.build_dependency_tree(profile.frame_count, profile.sizes, profile.errors[lowest], lowest)
        cut = abr.select_dependency_depth(tree, budget)
        heads = [s for s, _ in cut]
        plan = abr.optimize_chunk(profile.options(decode_model, heads), budget, coeffs, workers=workers)
        return plan, heads, False
    except InfeasibleBudget:
        return _fallback_plan(profile, decode_model, coeffs), [0], True


def simulate(profiles: Sequence[ChunkProfile], trace: BandwidthTrace, coeffs: abr.QoECoefficients,
             decode_model: DecodeTimeModel, startup_buffer_s: float = 1.0, fps: int = 30,
             horizon_s: float | None = None, workers: int = 1) -> SimReport:
    """Stream every chunk over ``trace`` and account playback, stalls and distortion.

    The budget of a chunk is what the trace delivered during the chunk
    duration before it became available (look-back estimate). Decode time is
    the model's prediction summed over reconstructed frames. The run stops at
    ``horizon_s`` (default: startup + twice the content length + trace span)
    if a chunk cannot be delivered, e.g. under zero bandwidth.
    """
    if not profiles:
        raise ValueError("stream has no chunks")
    if startup_buffer_s < 0:
        raise ValueError("startup_buffer_s must be >= 0")
    startup = Fraction(startup_buffer_s)
    content = sum(Fraction(p.frame_count, fps) for p in profiles)
    horizon = Fraction(horizon_s) if horizon_s is not None else (
        startup + 2 * content + Fraction(trace.times[-1]) - Fraction(trace.times[0]))
    records: list[ChunkRecord] = []
    overruns = []
    available = Fraction(0)
    link_free = Fraction(0)
    stall = Fraction(0)
    play_at = startup  # scheduled start of the next chunk's playback
    playback = Fraction(0)
    stopped = False
    for idx, prof in enumerate(profiles):
        duration = Fraction(prof.frame_count, fps)
        budget = int(math.floor(trace.integrate(available - duration, available) / 8))
        plan, heads, overrun = plan_chunk(prof, budget, coeffs, decode_model, workers)
        if overrun:
            overruns.append(idx)
        decode = sum((Fraction(c.decode_latency) for c in plan.choices), Fraction(0))
        hd = [c.quality_error for c in plan.choices]
        start = max(available, link_free)
        sent = plan.total_bytes + prof.overhead_bytes
        tx = None if stopped else trace.time_to_send(start, sent * 8)
        ready = None if tx is None else start + tx + decode
        if ready is None or ready > horizon:
            lost = Fraction(0) if stopped else max(horizon - play_at, Fraction(0))
            stall += lost
            stopped = True
            records.append(ChunkRecord(idx, available, budget, heads, plan.labels, sent, overrun,
                                       False, tx, decode, None, None, lost, [], plan.total_qoe, plan))
        else:
            wait = max(ready - play_at, Fraction(0))
            stall += wait
            play = play_at + wait
            records.append(ChunkRecord(idx, available, budget, heads, plan.labels, sent, overrun,
                                       True, tx, decode, ready, play, wait, hd, plan.total_qoe, plan))
            playback += duration
            play_at = play + duration
            link_free = ready
        available += duration
    total = max(horizon, play_at) if stopped else play_at
    return SimReport(records, Fraction(profiles[0].frame_count, fps), startup, playback, stall, total, overruns)
