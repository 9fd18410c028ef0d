import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deformstream.codec import (
    MAGIC, RAW_LABEL, BitrateLadder, EncodedGoF, Level, decode_gof, decode_stream, deserialize_stream,
    encode_gof, encode_sequence, graph_bytes, measure_sizes, mesh_bytes, params_bytes, serialize_stream,
)
from deformstream.deform_graph import DeformationParams
from deformstream.errors import BadMagic, CorruptStream, MissingLevel, SizeMismatch, TruncatedStream, UnsupportedVersion
from deformstream.mesh_core import MeshSequence, cylinder_mesh, generate_synthetic_sequence, grid_mesh, uv_sphere
from deformstream.metrics import hausdorff


@pytest.fixture(scope="module")
def translate_gof():
    seq = generate_synthetic_sequence("rigid_translate", uv_sphere(8, 10), 5, 0.4)
    return seq, encode_gof(seq, BitrateLadder.from_counts([4, 12]))


@pytest.fixture(scope="module")
def bend_stream():
    seq = generate_synthetic_sequence("bend", cylinder_mesh(8, 12), 7, 0.8)
    return seq, encode_sequence(seq, BitrateLadder.from_counts([4, 10]), gof_length=3)


def test_ladder_parsing_and_validation():
    lad = BitrateLadder.parse("L1:8, L2:16,hi:64")
    assert lad.labels == ["L1", "L2", "hi"] and lad.node_counts == [8, 16, 64]
    assert BitrateLadder.parse("4,9").labels == ["L1", "L2"]
    assert lad.node_count("hi") == 64
    with pytest.raises(MissingLevel):
        lad.node_count("L9")
    for bad in ("8,8", "16,8", "0", ""):
        with pytest.raises(ValueError):
            BitrateLadder.parse(bad)
    with pytest.raises(ValueError):
        BitrateLadder((Level(RAW_LABEL, 3),))


def test_single_frame_gof_has_no_p_frames():
    enc = encode_gof([grid_mesh(4, 4)], BitrateLadder.from_counts([3]))
    assert enc.gof_length == 1 and enc.p_frames == []
    assert decode_gof(enc, ["L1"]).frames[0] == enc.i_frame


def test_static_sequence_decodes_to_input():
    base = uv_sphere(8, 10)
    seq = MeshSequence((base,) * 3)
    enc = encode_gof(seq, BitrateLadder.from_counts([5]))
    for frame in enc.p_frames:
        assert np.allclose(frame["L1"].rotations, np.eye(3), atol=1e-6)
        assert np.allclose(frame["L1"].translations, 0.0, atol=1e-6)
    out = decode_gof(enc, ["L1"] * 3)
    for a, b in zip(out, seq):
        assert hausdorff(a, b) < 1e-6 * base.bbox_diagonal()


def test_rigid_translate_params_follow_the_motion(translate_gof):
    seq, enc = translate_gof
    step = 0.4 / 4
    for frame in enc.p_frames:
        p = frame["L1"]
        assert np.allclose(p.translations, [step, 0, 0], atol=1e-6)
        assert np.allclose(p.rotations, np.eye(3), atol=1e-6)


def test_rigid_translate_round_trip(translate_gof):
    seq, enc = translate_gof
    diag = seq[0].bbox_diagonal()
    for label in ("L1", "L2"):
        out = decode_gof(enc, [label] * 5)
        assert all(hausdorff(a, b) < 1e-3 * diag for a, b in zip(out, seq))


def test_level_switching_decodes(bend_stream):
    seq, gofs = bend_stream
    out = decode_gof(gofs[0], ["L1", "L2", "L1"])
    assert len(out) == 3


def test_decode_errors(translate_gof):
    _, enc = translate_gof
    with pytest.raises(MissingLevel):
        decode_gof(enc, ["L1", "L1", "L7", "L1", "L1"])
    with pytest.raises(SizeMismatch):
        decode_gof(enc, ["L1"])


def test_raw_choice_uses_the_delivered_frame(translate_gof):
    seq, enc = translate_gof
    out = decode_gof(enc, ["L1", "L1", RAW_LABEL, "L1", "L1"], raw_frames=seq.frames)
    assert out[2] == seq[2]


def test_identity_params_decode_to_i_frame():
    base = grid_mesh(5, 5)
    seq = MeshSequence((base,) * 4)
    enc = encode_gof(seq, BitrateLadder.from_counts([4]))
    out = decode_gof(enc, ["L1"] * 4)
    assert all(f == enc.i_frame for f in out)


def test_stream_round_trip_is_exact(bend_stream):
    _, gofs = bend_stream
    back = deserialize_stream(serialize_stream(gofs))
    assert back == gofs
    a = decode_stream(gofs, "L2")
    b = decode_stream(back, "L2")
    assert a == b


def test_empty_stream_is_header_only():
    data = serialize_stream([])
    assert data == MAGIC + struct.pack("<I", 1) and len(data) == 8
    assert deserialize_stream(data) == []


def test_byte_layout_of_a_tiny_gof():
    enc = encode_gof([grid_mesh(3, 3)], BitrateLadder.from_counts([2]))
    g = enc.graphs["L1"]
    data = serialize_stream([enc])
    expected = 8 + 12 + (12 + 4 * 2 + 8 * len(g.edges)) + (8 + 12 * 9 + 12 * 8)
    assert len(data) == expected
    assert struct.unpack_from("<III", data, 8) == (1, 30, 1)


def test_truncated_p_frame_reports_record_offset(bend_stream):
    _, gofs = bend_stream
    data = serialize_stream(gofs[:1])
    last_record = len(data) - params_bytes(10)
    with pytest.raises(TruncatedStream) as exc:
        deserialize_stream(data[:-5])
    assert exc.value.offset == last_record


def test_bad_magic_and_version(bend_stream):
    _, gofs = bend_stream
    data = serialize_stream(gofs)
    with pytest.raises(BadMagic):
        deserialize_stream(b"XXXX" + data[4:])
    with pytest.raises(UnsupportedVersion):
        deserialize_stream(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(TruncatedStream):
        deserialize_stream(data[:6])


def test_corrupt_edges_are_detected():
    enc = encode_gof([uv_sphere(6, 8)] * 2, BitrateLadder.from_counts([4]))
    data = bytearray(serialize_stream([enc]))
    # first edge endpoint sits after the GoF header, level header and node ids
    off = 8 + 12 + 12 + 4 * 4
    data[off:off + 4] = struct.pack("<I", 3 if struct.unpack_from("<I", data, off)[0] != 3 else 2)
    with pytest.raises(CorruptStream):
        deserialize_stream(bytes(data))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15)
def test_serialization_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    base = grid_mesh(int(rng.integers(3, 7)), int(rng.integers(3, 7)))
    ladder = BitrateLadder.from_counts(sorted(rng.choice(np.arange(1, base.vertex_count + 1), 2, replace=False)))
    n = int(rng.integers(1, 4))
    enc = encode_gof([base] * n, ladder)
    for frame in enc.p_frames:
        for lv in ladder.levels:
            x = rng.standard_normal((lv.node_count, 12)).astype(np.float32).astype(np.float64)
            frame[lv.label] = DeformationParams.from_array(x)
    assert deserialize_stream(serialize_stream([enc, enc])) == [enc, enc]


def test_sizes_follow_the_layout():
    mesh = grid_mesh(10, 10)
    assert mesh.vertex_count == 100 and mesh.face_count == 162
    assert mesh_bytes(100, 196) == 8 + 100 * 3 * 4 + 196 * 3 * 4
    assert params_bytes(50) == 50 * 12 * 4
    assert graph_bytes(4, 3) == 12 + 16 + 24


def test_measure_sizes(translate_gof):
    seq, enc = translate_gof
    table = measure_sizes(enc, seq)
    assert table.raw == [mesh_bytes(seq[0].vertex_count, seq[0].face_count)] * 5
    assert table.p["L2"] == [params_bytes(12)] * 5
    assert table.option_size(2, RAW_LABEL) == table.raw[2]
    with pytest.raises(SizeMismatch):
        measure_sizes(enc, seq[:2])


@given(st.integers(20, 5000), st.integers(1, 5000))
def test_small_graphs_compress(vertices, faces):
    nodes = max(1, int(0.05 * vertices))
    assert params_bytes(nodes) <= 0.25 * mesh_bytes(vertices, faces)
    if nodes * 12 < vertices * 3 + faces * 3:
        assert params_bytes(nodes) < mesh_bytes(vertices, faces)


def test_corrupting_one_p_frame_only_changes_later_frames(bend_stream):
    _, gofs = bend_stream
    enc = gofs[0]
    clean = decode_gof(enc, ["L2"] * 3)
    bad_frames = [dict(f) for f in enc.p_frames]
    p = bad_frames[1]["L2"]
    bad_frames[1]["L2"] = DeformationParams(p.rotations, p.translations + 0.5)
    bad = EncodedGoF(enc.i_frame, enc.graphs, bad_frames, enc.ladder, enc.fps)
    out = decode_gof(bad, ["L2"] * 3)
    assert out[0] == clean[0] and out[1] == clean[1]
    assert not np.array_equal(out[2].vertices, clean[2].vertices)


def test_decoding_is_deterministic(bend_stream):
    _, gofs = bend_stream
    assert decode_stream(gofs, "L1") == decode_stream(gofs, "L1")


def test_gof_split(bend_stream):
    seq, gofs = bend_stream
    assert [g.gof_length for g in gofs] == [3, 3, 1]
    assert len(decode_stream(gofs, ["L1"] * 7)) == len(seq)
