"""Hausdorff distance, rate-distortion curves and Bjontegaard delta rate."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMesh, InsufficientPoints, MalformedRow, NoOverlap
from .mesh_core import MeshSequence, TriangleMesh


def _points(mesh_or_points) -> np.ndarray:
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriangleMesh) else np.asarray(mesh_or_points, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyMesh("Hausdorff distance needs non-empty vertex sets")
    return pts


def _exact_distances(x: np.ndarray, ys: np.ndarray) -> np.ndarray:
    d = x - ys
    return np.sqrt((d * d).sum(axis=-1))


_SLACK = 1e-9


def directed_hausdorff(a, b) -> float:
    """``max_x min_y |x - y|`` for x in ``a`` and y in ``b``.

    A k-d tree ranks every point of ``a``. Points whose tree distance is
    within a relative 1e-9 of the maximum are re-evaluated with the plain
    Euclidean formula over every neighbour that could be the true nearest,
    so the result equals the brute-force double loop exactly.
    """
    pa, pb = _points(a), _points(b)
    tree = cKDTree(pb)
    approx, _ = tree.query(pa, k=1)
    top = approx.max()
    if top == 0:
        return 0.0
    cand = np.flatnonzero(approx >= top * (1 - _SLACK))
    k = min(8, len(pb))
    dk, ik = tree.query(pa[cand], k=k)
    dk, ik = dk.reshape(len(cand), k), ik.reshape(len(cand), k)
    exact = _exact_distances(pa[cand][:, None, :], pb[ik]).min(axis=1)
    # rows whose k-th neighbour is not clearly farther may hide a near-tie
    unsure = np.flatnonzero((dk[:, -1] <= approx[cand] * (1 + _SLACK)) & (k < len(pb)))
    for r in unsure:
        x = pa[cand[r]]
        near = tree.query_ball_point(x, approx[cand[r]] * (1 + _SLACK))
        exact[r] = _exact_distances(x[None, :], pb[near]).min()
    return float(exact.max())


def hausdorff(a, b) -> float:
    """Symmetric vertex-set Hausdorff distance between two meshes (or point arrays)."""
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def sequence_hausdorff(decoded: Sequence[TriangleMesh], reference: Sequence[TriangleMesh]) -> list[float]:
    return [hausdorff(x, y) for x, y in zip(decoded, reference)]


@dataclass(frozen=True)
class RDCurve:
    """(bitrate bits/s, distortion) points sorted by strictly increasing bitrate."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(r), float(d)) for r, d in self.points)
        if any(not (math.isfinite(r) and math.isfinite(d)) for r, d in pts):
            raise ValueError("R-D points must be finite")
        if any(r <= 0 for r, _ in pts) or any(d < 0 for _, d in pts):
            raise ValueError("bitrates must be > 0 and distortions >= 0")
        if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise ValueError("bitrates must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_unsorted(cls, points) -> "RDCurve":
        return cls(tuple(sorted(points)))

    @property
    def bitrates(self) -> np.ndarray:
        return np.array([r for r, _ in self.points])

    @property
    def distortions(self) -> np.ndarray:
        return np.array([d for _, d in self.points])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bitrate_bps", "distortion"])
        for r, d in self.points:
            w.writerow([repr(r), repr(d)])
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RDCurve":
        points = []
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].strip().startswith("#"):
                    continue
                if len(row) != 2:
                    raise MalformedRow(lineno, f"expected 2 columns, got {len(row)}")
                try:
                    points.append((float(row[0]), float(row[1])))
                except ValueError:
                    if lineno == 1:
                        continue  # header
                    raise MalformedRow(lineno, "non-numeric value") from None
        try:
            return cls(tuple(points))
        except ValueError as exc:
            raise MalformedRow(0, str(exc)) from None


def bd_rate(reference: RDCurve, test: RDCurve) -> float:
    """Bjontegaard delta rate of ``test`` against ``reference`` in percent.

    Fits log10(bitrate) as a cubic in distortion for each curve, integrates
    both fits over the shared distortion range and converts the mean log
    difference back to a relative rate. Negative values mean ``test`` needs
    less bitrate for the same distortion.
    """
    for name, curve in (("reference", reference), ("test", test)):
        if len(curve.points) < 4:
            raise InsufficientPoints(f"{name} curve has {len(curve.points)} points, need at least 4")
    d_ref, d_test = reference.distortions, test.distortions
    lo = max(d_ref.min(), d_test.min())
    hi = min(d_ref.max(), d_test.max())
    if not hi > lo:
        raise NoOverlap(f"distortion ranges do not overlap ([{d_ref.min():g}, {d_ref.max():g}] vs [{d_test.min():g}, {d_test.max():g}])")
    p_ref = np.polyint(np.polyfit(d_ref, np.log10(reference.bitrates), 3))
    p_test = np.polyint(np.polyfit(d_test, np.log10(test.bitrates), 3))
    area_ref = np.polyval(p_ref, hi) - np.polyval(p_ref, lo)
    area_test = np.polyval(p_test, hi) - np.polyval(p_test, lo)
    mean_diff = (area_test - area_ref) / (hi - lo)
    return float((10.0 ** mean_diff - 1.0) * 100.0)


def build_rd_curve(sequence: MeshSequence, ladder, weights=None, opts=None, gof_length: int | None = None) -> RDCurve:
    """Encode ``sequence`` once per ladder level and measure (bitrate, mean Hausdorff).

    Every P-frame uses the same level; bitrate counts I-frames, node graphs
    and P-frames of that level over the sequence duration.
    """
    from .codec import decode_gof, encode_sequence, measure_sizes

    gofs = encode_sequence(sequence, ladder, weights, opts, gof_length or len(sequence))
    points = []
    for level in ladder.levels:
        total_bytes = 0
        errors = []
        start = 0
        for enc in gofs:
            frames = sequence.frames[start:start + enc.gof_length]
            table = measure_sizes(enc, frames)
            total_bytes += table.raw[0] + table.graph_bytes[level.label] + sum(table.p[level.label][1:])
            decoded = decode_gof(enc, [level.label] * enc.gof_length)
            errors += sequence_hausdorff(decoded.frames, frames)
            start += enc.gof_length
        bitrate = total_bytes * 8.0 / sequence.duration_s
        points.append((bitrate, float(np.mean(errors))))
    return RDCurve.from_unsorted(points)
