import json
from fractions import Fraction

import numpy as np
import pytest

from deformstream.abr import QoECoefficients
from deformstream.codec import BitrateLadder, FrameSizeTable, encode_sequence
from deformstream.errors import MalformedRow, NonMonotonicTime
from deformstream.mesh_core import cylinder_mesh, generate_synthetic_sequence, grid_mesh
from deformstream.netsim import (
    BandwidthTrace, ChunkProfile, DecodeTimeModel, load_trace, profile_decode_time, profile_stream, simulate,
)

COEFFS = QoECoefficients()
FAST = DecodeTimeModel(1e-6, 1e-4)


def make_profile(frames=30, raw=30_000, p=(100, 1000), graph=(50, 500), err=(0.1, 0.01), drift=0.0):
    labels = [f"L{i + 1}" for i in range(len(p))]
    sizes = FrameSizeTable([raw] * frames, {lb: [b] * frames for lb, b in zip(labels, p)},
                           dict(zip(labels, graph)))
    errors = {lb: [0.0] + [e * (1 + drift * t) for t in range(1, frames)] for lb, e in zip(labels, err)}
    return ChunkProfile(sizes, errors, {lb: 16 * 4 ** i for i, lb in enumerate(labels)})


def random_profiles(rng, count):
    out = []
    for _ in range(count):
        raw = int(rng.integers(5_000, 20_000))
        p = np.sort(rng.choice(np.arange(50, 3000), 3, replace=False))
        err = np.sort(rng.uniform(0.001, 0.2, 3))[::-1]
        out.append(make_profile(30, raw, tuple(int(x) for x in p), (40, 120, 400), tuple(err),
                                float(rng.uniform(0, 0.05))))
    return out


def lte_trace(rng, seconds=20, lo=40e3, hi=80e3):
    bw = np.clip(np.cumsum(rng.normal(0, 8e3, seconds)) + (lo + hi) / 2, lo, hi)
    return BandwidthTrace(tuple(float(t) for t in range(seconds)), tuple(float(b) for b in bw))


def write(tmp_path, text, name="trace.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_trace_examples(tmp_path):
    trace = load_trace(write(tmp_path, "0,8e6\n1,8e6\n"))
    assert trace.times == (0.0, 1.0) and trace.bandwidths == (8e6, 8e6)
    assert trace.integrate(0, 5) == 40_000_000
    trace = load_trace(write(tmp_path, "time_s,bandwidth_bps\n# comment\n0,1\n0.5,2\n"))
    assert len(trace) == 2


def test_load_trace_errors(tmp_path):
    with pytest.raises(NonMonotonicTime) as exc:
        load_trace(write(tmp_path, "0,1\n2,1\n1,1\n"))
    assert exc.value.line == 3
    with pytest.raises(MalformedRow) as exc:
        load_trace(write(tmp_path, "0,1\n1,abc\n"))
    assert exc.value.line == 2
    with pytest.raises(MalformedRow):
        load_trace(write(tmp_path, "0,1,2\n"))
    with pytest.raises(MalformedRow):
        load_trace(write(tmp_path, "0,-5\n"))
    with pytest.raises(MalformedRow):
        load_trace(write(tmp_path, "time_s,bandwidth_bps\n"))


def test_load_trace_keeps_every_row(tmp_path, rng):
    trace = lte_trace(rng, 137)
    text = "".join(f"{t!r},{b!r}\n" for t, b in zip(trace.times, trace.bandwidths))
    loaded = load_trace(write(tmp_path, text))
    assert len(loaded) == 137 and loaded == trace


def test_trace_integration_and_send_time():
    trace = BandwidthTrace((0.0, 1.0, 2.0), (8.0, 0.0, 16.0))
    assert trace.integrate(-1, 0) == 8
    assert trace.integrate(0.5, 2.5) == 4 + 0 + 8
    assert trace.integrate(2, 2) == 0
    assert trace.time_to_send(0, 8) == 1
    assert trace.time_to_send(0.5, 12) == 2
    assert trace.time_to_send(0.5, 13) == Fraction(33, 16)
    assert trace.time_to_send(1, 0) == 0
    assert trace.rate_at(1.5) == 0.0 and trace.rate_at(99) == 16.0
    assert BandwidthTrace.constant(0).time_to_send(0, 1) is None
    assert trace.scaled(0.5).integrate(0, 1) == 4


def test_decode_model_exact_fit():
    model = profile_decode_time(grid_mesh(20, 20), [120, 200, 300], measure=lambda n: 2e-6 * n + 1e-3)
    assert model.alpha == pytest.approx(2e-6, rel=1e-9)
    assert model.beta == pytest.approx(1e-3, rel=1e-9)
    assert model.fit_r2 == pytest.approx(1.0, abs=1e-12)
    assert model.predict(1000) == pytest.approx(3e-3)


def test_decode_model_with_injected_clock():
    counts = [10, 40, 90]
    ticks = []
    for n in counts:
        for _ in range(3):
            ticks += [0.0, 0.5 + 0.01 * n]
    it = iter(ticks)
    model = profile_decode_time(grid_mesh(10, 10), counts, repetitions=3, clock=lambda: next(it))
    assert model.alpha == pytest.approx(0.01) and model.beta == pytest.approx(0.5)
    assert model.seconds == pytest.approx((0.6, 0.9, 1.4))


def test_decode_model_single_count_and_constraints():
    model = profile_decode_time(grid_mesh(5, 5), [7], measure=lambda n: 0.25)
    assert (model.alpha, model.beta, model.fit_r2) == (0.0, 0.25, 1.0)
    falling = DecodeTimeModel.fit([1, 2, 3], [3.0, 2.0, 1.0])
    assert falling.alpha == 0.0 and falling.beta == 2.0
    through_origin = DecodeTimeModel.fit([1, 2, 3], [0.5, 2.0, 3.5])
    assert through_origin.beta == 0.0 and through_origin.alpha > 0
    with pytest.raises(ValueError):
        DecodeTimeModel(-1.0, 0.0)
    with pytest.raises(ValueError):
        profile_decode_time(grid_mesh(3, 3), [100])


def test_high_bandwidth_streams_raw_without_stalls():
    profiles = [make_profile() for _ in range(4)]
    report = simulate(profiles, BandwidthTrace.constant(1e9), COEFFS, FAST)
    assert report.total_rebuffer_s == 0.0
    assert all(h == 0.0 for h in report.hausdorff) and len(report.hausdorff) == 120
    assert all(set(c.labels) == {"raw"} for c in report.chunks)
    assert report.overruns == []


def test_zero_bandwidth_starves_after_startup():
    profiles = [make_profile() for _ in range(3)]
    report = simulate(profiles, BandwidthTrace.constant(0.0), COEFFS, FAST, startup_buffer_s=1.0, horizon_s=10)
    assert not any(c.delivered for c in report.chunks)
    assert report.playback_s == 0
    assert report.rebuffer_s == 9 and report.total_time_s == 10
    assert report.overruns == [0, 1, 2]


def test_square_wave_alternates_levels():
    # trough: all-L1 fits with 500 B spare, one L2 frame would need 900 more
    # peak: all-L2 fits, a second I-frame never does
    profile = make_profile()
    trough = 30_000 + 29 * 100 + 550 + 500
    peak = 30_000 + 29 * 1000 + 550 + 500
    rates = [trough * 8 if k % 2 == 0 else peak * 8 for k in range(12)]
    trace = BandwidthTrace(tuple(float(k) for k in range(12)), tuple(float(r) for r in rates))
    report = simulate([profile] * 10, trace, COEFFS, FAST)
    kinds = []
    for c in report.chunks:
        assert not c.overrun
        assert c.bytes - profile.overhead_bytes <= c.budget_bytes - profile.overhead_bytes
        assert c.heads == [0]
        if c.budget_bytes == peak:
            assert c.labels == ["raw"] + ["L2"] * 29
            kinds.append("hi")
        else:
            assert c.budget_bytes == trough
            assert c.labels == ["raw"] + ["L1"] * 29
            kinds.append("lo")
    assert kinds == ["lo", "lo", "hi", "lo", "hi", "lo", "hi", "lo", "hi", "lo"]


@pytest.mark.parametrize("seed", range(8))
def test_budget_compliance_and_conservation(seed):
    rng = np.random.default_rng(seed)
    profiles = random_profiles(rng, 6)
    trace = lte_trace(rng, 10, 20e3, 200e3)
    report = simulate(profiles, trace, COEFFS, FAST, startup_buffer_s=float(rng.uniform(0, 2)))
    for c, p in zip(report.chunks, profiles):
        if not c.overrun:
            assert c.bytes <= c.budget_bytes
        assert c.rebuffer_s >= 0
    assert report.total_time_s == report.startup_delay_s + report.playback_s + report.rebuffer_s
    assert report.rebuffer_s == sum(c.rebuffer_s for c in report.chunks)


def test_conservation_when_the_link_dies():
    trace = BandwidthTrace((0.0, 2.0), (1e6, 0.0))
    report = simulate([make_profile()] * 5, trace, COEFFS, FAST)
    assert any(not c.delivered for c in report.chunks)
    assert report.total_time_s == report.startup_delay_s + report.playback_s + report.rebuffer_s


@pytest.mark.parametrize("seed", range(6))
def test_scaling_the_trace_down_degrades(seed):
    rng = np.random.default_rng(100 + seed)
    profiles = random_profiles(rng, 6)
    trace = lte_trace(rng, 10, 100e3, 400e3)
    reports = [simulate(profiles, trace.scaled(s), COEFFS, FAST) for s in (1.0, 0.6, 0.3)]
    rebuffer = [r.rebuffer_s for r in reports]
    quality = [r.mean_hausdorff for r in reports]
    assert rebuffer[0] <= rebuffer[1] <= rebuffer[2]
    assert quality[0] <= quality[1] <= quality[2]


def test_simulation_is_deterministic(rng):
    profiles = random_profiles(rng, 5)
    trace = lte_trace(rng, 8, 50e3, 300e3)
    a = simulate(profiles, trace, COEFFS, FAST)
    b = simulate(profiles, trace, COEFFS, FAST, workers=3)
    assert a.to_json() == b.to_json()


def test_report_exports(rng):
    profiles = random_profiles(rng, 4)
    report = simulate(profiles, lte_trace(rng, 6, 60e3, 300e3), COEFFS, FAST)
    data = json.loads(report.to_json())
    assert data["aggregates"]["chunks"] == 4 and len(data["chunks"]) == 4
    assert data["aggregates"]["total_rebuffer_s"] == pytest.approx(sum(c["rebuffer_s"] for c in data["chunks"]))
    rows = report.to_csv().strip().splitlines()
    assert len(rows) == 1 + 4 and rows[0].startswith("chunk,")
    plan_rows = [json.loads(x) for x in report.plans_jsonl().splitlines()]
    assert [r["frame"] for r in plan_rows] == list(range(120))
    assert report.median_hausdorff <= max(report.hausdorff)


def test_profile_stream_from_encoded_gofs():
    seq = generate_synthetic_sequence("bend", cylinder_mesh(6, 10), 6, 0.6)
    gofs = encode_sequence(seq, BitrateLadder.from_counts([3, 8]), gof_length=3)
    profiles = profile_stream(gofs, seq)
    assert [p.frame_count for p in profiles] == [3, 3]
    for p in profiles:
        assert p.errors["L1"][0] == 0.0 and p.node_counts == {"L1": 3, "L2": 8}
        assert p.overhead_bytes == sum(p.sizes.graph_bytes.values())
    report = simulate(profiles, BandwidthTrace.constant(1e9), COEFFS, FAST, fps=3)
    assert report.total_rebuffer_s == 0.0
    with pytest.raises(ValueError):
        profile_stream(gofs, seq[:4])
