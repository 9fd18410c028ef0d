"""Group-of-frames encoder/decoder and the binary stream format.

Stream layout (little-endian)::

    b"DFST"  u32 version (=1)
    per GoF:
        u32 gof_length, u32 fps, u32 level_count
        per level:   u32 node_count, f32 radius, u32 edge_count,
                     u32 node_vertex_ids[node_count], u32 edges[edge_count][2]
        I-frame:     u32 vertex_count, u32 face_count,
                     f32 positions[vertex_count][3], u32 indices[face_count][3]
        per P-frame (gof_length - 1 of them), per level:
                     f32 [node_count][12]   (row-major 3x3 R_j, then t_j)

Level labels are not stored; a deserialized ladder is labelled L1..Lk.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .deform_graph import DeformationParams, NodeGraph, apply_deformation, extract_nested_graphs
from .errors import (
    BadMagic,
    CorruptStream,
    MissingLevel,
    SizeMismatch,
    TruncatedStream,
    UnsupportedVersion,
)
from .mesh_core import MeshSequence, TriangleMesh
from .registration import EnergyWeights, SolveReport, SolverOptions, solve_deformation

MAGIC = b"DFST"
VERSION = 1
FLOAT_BYTES = 4
FLOATS_PER_NODE = 12
MESH_HEADER_BYTES = 8  # vertex_count + face_count
PARAMS_HEADER_BYTES = 0  # P-frame records carry no header of their own
RAW_LABEL = "raw"


@dataclass(frozen=True)
class Level:
    label: str
    node_count: int


@dataclass(frozen=True)
class BitrateLadder:
    """Node-graph density levels, sparsest first."""

    levels: tuple[Level, ...]

    def __post_init__(self):
        levels = tuple(lv if isinstance(lv, Level) else Level(*lv) for lv in self.levels)
        if not levels:
            raise ValueError("a ladder needs at least one level")
        counts = [lv.node_count for lv in levels]
        if any(c < 1 for c in counts) or any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"node counts must be >= 1 and strictly increasing, got {counts}")
        labels = [lv.label for lv in levels]
        if len(set(labels)) != len(labels) or RAW_LABEL in labels:
            raise ValueError(f"level labels must be unique and not {RAW_LABEL!r}: {labels}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "BitrateLadder":
        return cls(tuple(Level(f"L{i + 1}", int(c)) for i, c in enumerate(counts)))

    @classmethod
    def parse(cls, text: str) -> "BitrateLadder":
        """Parse ``"L1:8,L2:16"`` or plain ``"8,16"``."""
        levels = []
        for i, item in enumerate(x.strip() for x in text.split(",") if x.strip()):
            label, _, count = item.rpartition(":")
            levels.append(Level(label or f"L{i + 1}", int(count)))
        return cls(tuple(levels))

    @property
    def labels(self) -> list[str]:
        return [lv.label for lv in self.levels]

    @property
    def node_counts(self) -> list[int]:
        return [lv.node_count for lv in self.levels]

    def node_count(self, label: str) -> int:
        for lv in self.levels:
            if lv.label == label:
                return lv.node_count
        raise MissingLevel(f"no ladder level {label!r}")

    def __str__(self) -> str:
        return ",".join(f"{lv.label}:{lv.node_count}" for lv in self.levels)


@dataclass(eq=False)
class EncodedGoF:
    """One I-frame (mesh plus a graph per level) and per-level P-frame parameters."""

    i_frame: TriangleMesh
    graphs: dict[str, NodeGraph]
    p_frames: list[dict[str, DeformationParams]]
    ladder: BitrateLadder
    fps: int = 30
    reports: list[dict[str, SolveReport]] = field(default_factory=list)

    def __post_init__(self):
        for t, frame in enumerate(self.p_frames, start=1):
            for lv in self.ladder.levels:
                if lv.label not in frame:
                    raise MissingLevel(f"P-frame {t} lacks level {lv.label!r}")
                if len(frame[lv.label]) != lv.node_count:
                    raise SizeMismatch(f"P-frame {t} level {lv.label}: {len(frame[lv.label])} nodes, expected {lv.node_count}")

    @property
    def gof_length(self) -> int:
        return len(self.p_frames) + 1

    def __eq__(self, other):
        if not isinstance(other, EncodedGoF):
            return NotImplemented
        if self.ladder != other.ladder or self.fps != other.fps or self.i_frame != other.i_frame:
            return False
        for label in self.ladder.labels:
            a, b = self.graphs[label], other.graphs[label]
            if not (np.array_equal(a.node_vertex_ids, b.node_vertex_ids) and a.influence_radius == b.influence_radius
                    and np.array_equal(a.edges, b.edges)):
                return False
        return len(self.p_frames) == len(other.p_frames) and all(
            x[label] == y[label] for x, y in zip(self.p_frames, other.p_frames) for label in self.ladder.labels
        )

    __hash__ = None


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _f32_radius(radius: float) -> float:
    r = np.float32(radius)
    if float(r) < radius:
        r = np.nextafter(r, np.float32(np.inf))
    return float(r)


def _wire_graphs(i_frame: TriangleMesh, ladder: BitrateLadder) -> dict[str, NodeGraph]:
    graphs = extract_nested_graphs(i_frame, ladder.node_counts)
    # radii travel as f32; rounding up keeps every vertex covered
    return {
        lv.label: NodeGraph.build(i_frame.vertices, g.node_vertex_ids, _f32_radius(g.influence_radius))
        for lv, g in zip(ladder.levels, graphs)
    }


def encode_gof(frames: Sequence[TriangleMesh] | MeshSequence, ladder: BitrateLadder,
               weights: EnergyWeights | None = None, opts: SolverOptions | None = None,
               fps: int | None = None) -> EncodedGoF:
    """Encode one GoF.

    Every level is solved for every P-frame, each chained on the frame the
    decoder will reconstruct at that level (closed loop), with parameters
    rounded to float32 exactly as they are transmitted.
    """
    if isinstance(frames, MeshSequence):
        fps = fps or frames.fps
        frames = frames.frames
    frames = list(frames)
    if not frames:
        raise SizeMismatch("a GoF needs at least one frame")
    MeshSequence(tuple(frames), fps or 30)  # topology check
    opts = opts or SolverOptions()
    i_frame = TriangleMesh(_f32(frames[0].vertices), frames[0].faces)
    graphs = _wire_graphs(i_frame, ladder)
    p_frames: list[dict[str, DeformationParams]] = [{} for _ in frames[1:]]
    reports: list[dict[str, SolveReport]] = [{} for _ in frames[1:]]
    for label, graph in graphs.items():
        prev = i_frame
        for t, target in enumerate(frames[1:]):
            g = graph.rebased(prev)
            params, report = solve_deformation(prev, g, target, weights, opts)
            params = params.as_float32()
            p_frames[t][label] = params
            reports[t][label] = report
            prev = apply_deformation(prev, g, params, opts.weight_mode)
    return EncodedGoF(i_frame, graphs, p_frames, ladder, fps or 30, reports)


def encode_sequence(sequence: MeshSequence, ladder: BitrateLadder, weights: EnergyWeights | None = None,
                    opts: SolverOptions | None = None, gof_length: int = 30, workers: int = 1) -> list[EncodedGoF]:
    """Split ``sequence`` into GoFs of ``gof_length`` frames (last may be shorter) and encode each."""
    if gof_length < 1:
        raise ValueError("gof_length must be >= 1")
    slices = [sequence.frames[s:s + gof_length] for s in range(0, len(sequence), gof_length)]
    job = lambda fr: encode_gof(fr, ladder, weights, opts, sequence.fps)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(job, slices))
    return [job(fr) for fr in slices]


def decode_gof(enc: EncodedGoF, level_per_frame: Sequence[str], weight_mode: str = "uniform",
               raw_frames: Sequence[TriangleMesh] | None = None) -> MeshSequence:
    """Reconstruct a GoF; frame t deforms decoded frame t-1 with the level chosen for t.

    The entry for frame 0 is ignored (the I-frame is always used). A ``"raw"``
    entry takes ``raw_frames[t]`` as delivered and later frames chain from it.
    """
    if len(level_per_frame) != enc.gof_length:
        raise SizeMismatch(f"{len(level_per_frame)} level choices for a {enc.gof_length}-frame GoF")
    frames = [enc.i_frame]
    for t, label in enumerate(level_per_frame[1:], start=1):
        if label == RAW_LABEL and raw_frames is not None:
            frames.append(raw_frames[t])
            continue
        if label not in enc.graphs:
            raise MissingLevel(f"frame {t}: no level {label!r} in this GoF")
        prev = frames[-1]
        g = enc.graphs[label].rebased(prev)
        frames.append(apply_deformation(prev, g, enc.p_frames[t - 1][label], weight_mode))
    return MeshSequence(tuple(frames), enc.fps)


# ---------------------------------------------------------------- sizes

@dataclass
class FrameSizeTable:
    """Encoded bytes per frame for the raw option and each ladder level.

    ``p[label][t]`` is the size of a P-frame at that level (uniform across t);
    ``graph_bytes`` is the per-GoF cost of shipping each level's node graph.
    """

    raw: list[int]
    p: dict[str, list[int]]
    graph_bytes: dict[str, int]

    def __len__(self) -> int:
        return len(self.raw)

    def option_size(self, frame: int, label: str) -> int:
        return self.raw[frame] if label == RAW_LABEL else self.p[label][frame]


def mesh_bytes(vertex_count: int, face_count: int) -> int:
    return MESH_HEADER_BYTES + 3 * FLOAT_BYTES * vertex_count + 3 * 4 * face_count


def params_bytes(node_count: int) -> int:
    return PARAMS_HEADER_BYTES + FLOATS_PER_NODE * FLOAT_BYTES * node_count


def graph_bytes(node_count: int, edge_count: int) -> int:
    return 12 + 4 * node_count + 8 * edge_count


def measure_sizes(enc: EncodedGoF, raw_frames: Sequence[TriangleMesh] | MeshSequence) -> FrameSizeTable:
    frames = list(raw_frames)
    if len(frames) != enc.gof_length:
        raise SizeMismatch(f"{len(frames)} raw frames for a {enc.gof_length}-frame GoF")
    raw = [mesh_bytes(f.vertex_count, f.face_count) for f in frames]
    p = {lv.label: [params_bytes(lv.node_count)] * len(frames) for lv in enc.ladder.levels}
    gb = {label: graph_bytes(g.node_count, len(g.edges)) for label, g in enc.graphs.items()}
    return FrameSizeTable(raw, p, gb)


# ---------------------------------------------------------------- wire format

def _pack_gof(enc: EncodedGoF, out: list[bytes]) -> None:
    out.append(struct.pack("<III", enc.gof_length, enc.fps, len(enc.ladder.levels)))
    for lv in enc.ladder.levels:
        g = enc.graphs[lv.label]
        out.append(struct.pack("<IfI", g.node_count, g.influence_radius, len(g.edges)))
        out.append(g.node_vertex_ids.astype("<u4").tobytes())
        out.append(g.edges.astype("<u4").tobytes())
    m = enc.i_frame
    out.append(struct.pack("<II", m.vertex_count, m.face_count))
    out.append(m.vertices.astype("<f4").tobytes())
    out.append(m.faces.astype("<u4").tobytes())
    for frame in enc.p_frames:
        for lv in enc.ladder.levels:
            out.append(frame[lv.label].to_array().astype("<f4").tobytes())


def serialize_stream(gofs: Sequence[EncodedGoF]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for enc in gofs:
        _pack_gof(enc, out)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def at_end(self) -> bool:
        return self.pos >= len(self.data)

    def take(self, n: int, record_start: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedStream(record_start, what)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def array(self, dtype: str, count: int, record_start: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size, record_start, what), dtype=dtype).copy()


def _unpack_gof(rd: _Reader) -> EncodedGoF:
    start = rd.pos
    gof_length, fps, level_count = struct.unpack("<III", rd.take(12, start, "GoF header"))
    if gof_length < 1 or level_count < 1 or fps < 1:
        raise CorruptStream(f"invalid GoF header at byte {start}")
    wire_levels = []
    for _ in range(level_count):
        rec = rd.pos
        n, radius, edge_count = struct.unpack("<IfI", rd.take(12, rec, "level record"))
        ids = rd.array("<u4", n, rec, "level record").astype(np.int64)
        edges = rd.array("<u4", 2 * edge_count, rec, "level record").astype(np.int64).reshape(-1, 2)
        wire_levels.append((n, float(radius), ids, edges))
    rec = rd.pos
    vcount, fcount = struct.unpack("<II", rd.take(8, rec, "I-frame"))
    verts = rd.array("<f4", 3 * vcount, rec, "I-frame").astype(np.float64).reshape(-1, 3)
    faces = rd.array("<u4", 3 * fcount, rec, "I-frame").astype(np.int64).reshape(-1, 3)
    try:
        i_frame = TriangleMesh(verts, faces)
        ladder = BitrateLadder.from_counts([n for n, *_ in wire_levels])
    except ValueError as exc:
        raise CorruptStream(f"GoF at byte {start}: {exc}") from None
    graphs = {}
    for lv, (n, radius, ids, edges) in zip(ladder.levels, wire_levels):
        if ids.size and ids.max() >= vcount:
            raise CorruptStream(f"GoF at byte {start}: node vertex id out of range")
        try:
            g = NodeGraph.build(i_frame.vertices, ids, radius)
        except ValueError as exc:
            raise CorruptStream(f"GoF at byte {start}: {exc}") from None
        if not np.array_equal(g.edges, edges):
            raise CorruptStream(f"GoF at byte {start}: level {lv.label} edges disagree with its influence sets")
        graphs[lv.label] = g
    p_frames = []
    for _ in range(gof_length - 1):
        frame = {}
        for lv in ladder.levels:
            rec = rd.pos
            x = rd.array("<f4", FLOATS_PER_NODE * lv.node_count, rec, "P-frame").astype(np.float64)
            try:
                frame[lv.label] = DeformationParams.from_array(x)
            except ValueError as exc:
                raise CorruptStream(f"P-frame record at byte {rec}: {exc}") from None
        p_frames.append(frame)
    return EncodedGoF(i_frame, graphs, p_frames, ladder, fps)


def deserialize_stream(data: bytes) -> list[EncodedGoF]:
    rd = _Reader(data)
    magic = bytes(rd.take(4, 0, "file header"))
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {magic!r}")
    (version,) = struct.unpack("<I", rd.take(4, 0, "file header"))
    if version != VERSION:
        raise UnsupportedVersion(f"stream version {version}, this decoder reads {VERSION}")
    gofs = []
    while not rd.at_end():
        gofs.append(_unpack_gof(rd))
    return gofs


def decode_stream(gofs: Sequence[EncodedGoF], level_per_frame: Sequence[str] | str,
                  weight_mode: str = "uniform", raw_frames: Sequence[TriangleMesh] | None = None) -> MeshSequence:
    """Decode consecutive GoFs; ``level_per_frame`` is one label or a label per frame."""
    frames: list[TriangleMesh] = []
    start = 0
    for enc in gofs:
        if isinstance(level_per_frame, str):
            labels = [level_per_frame] * enc.gof_length
        else:
            labels = list(level_per_frame[start:start + enc.gof_length])
        raw = None if raw_frames is None else list(raw_frames[start:start + enc.gof_length])
        frames += decode_gof(enc, labels, weight_mode, raw).frames
        start += enc.gof_length
    return MeshSequence(tuple(frames), gofs[0].fps if gofs else 30)
