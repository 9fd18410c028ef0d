import json

import pytest

from deformstream import cli
from deformstream.abr import QoECoefficients
from deformstream.config import RunConfig, load_config, parse_config
from deformstream.errors import ConfigError
from deformstream.metrics import RDCurve


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


def test_defaults():
    cfg = RunConfig()
    assert cfg.gof_length == 30 and cfg.fps == 30 and cfg.weight_mode == "uniform"
    assert cfg.qoe_coefficients() == QoECoefficients(1.0, 1.0, 1.0, True)
    assert cfg.bitrate_ladder().labels == ["L1", "L2"]


def test_parse_config_text():
    cfg = parse_config("# run\nlambda_reg = 0.5\nlatency_penalty = off  # flip sign\nladder = 8,32\ngof_length=10\n")
    assert cfg.lambda_reg == 0.5 and cfg.latency_penalty is False
    assert cfg.bitrate_ladder().node_counts == [8, 32] and cfg.gof_length == 10
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", ["nope = 1", "gof_length = ten", "gof_length = 0", "weight_mode = fancy",
                                  "mu1 = -1", "ladder = 9,3", "just words", "latency_penalty = maybe"])
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config(tmp_path):
    assert load_config(None) == RunConfig()
    path = tmp_path / "run.cfg"
    path.write_text("fps = 24\n")
    assert load_config(path).fps == 24
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


@pytest.fixture(scope="module")
def rigid(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    frames = root / "frames"
    assert cli.main(["gen-synthetic", str(frames), "--kind", "rigid_translate", "--shape", "grid",
                     "--resolution", "5", "--frames", "30", "--magnitude", "0.5"]) == 0
    stream = root / "s.dsm"
    assert cli.main(["encode", str(frames), str(stream), "--ladder", "L1:4,L2:9"]) == 0
    return root, frames, stream


def test_encode_summary(rigid, capsys, tmp_path):
    _, frames, _ = rigid
    code, out = run(capsys, "encode", frames, tmp_path / "a.dsm", "--ladder", "4,9")
    assert code == 0 and out["gofs"] == 1 and out["frames"] == 30
    assert out["per_gof"][0]["p_bytes"]["L2"][1] == 9 * 48
    code, out = run(capsys, "encode", frames, tmp_path / "b.dsm", "--set", "ladder=4", "--gof-length", "10")
    assert code == 0 and out["gofs"] == 3


def test_encode_errors(capsys, tmp_path):
    (tmp_path / "empty").mkdir()
    code, out = run(capsys, "encode", tmp_path / "empty", tmp_path / "x.dsm")
    assert code == 1 and out["error"] == "MissingDirectory"
    code, out = run(capsys, "encode", tmp_path / "empty", tmp_path / "x.dsm", "--set", "bogus")
    assert code == 1 and out["error"] == "ConfigError"


def test_decode_round_trip(rigid, capsys, tmp_path):
    _, frames, stream = rigid
    out_dir = tmp_path / "dec"
    code, out = run(capsys, "decode", stream, out_dir, "--reference", frames)
    assert code == 0 and out["frames"] == 30 and set(out["levels"]) == {"L2"}
    assert len(list(out_dir.glob("*.obj"))) == 30
    assert max(out["hausdorff"]) < 1e-3


def test_decode_follows_a_plan(rigid, capsys, tmp_path):
    _, frames, stream = rigid
    levels = ["raw"] + ["L1", "L2", "raw"] * 9 + ["L1", "L2"]
    plan = tmp_path / "plan.jsonl"
    plan.write_text("".join(json.dumps({"frame": t, "kind": "raw" if lv == "raw" else "reconstructed",
                                        "level": None if lv == "raw" else lv}) + "\n"
                            for t, lv in enumerate(levels)))
    code, out = run(capsys, "decode", stream, tmp_path / "d", "--plan", plan, "--reference", frames)
    assert code == 0 and out["levels"] == levels
    plan.write_text('{"frame": 0}\n')
    code, out = run(capsys, "decode", stream, tmp_path / "d", "--plan", plan)
    assert code == 1


def test_decode_rejects_corrupt_streams(rigid, capsys, tmp_path):
    _, _, stream = rigid
    data = stream.read_bytes()
    bad = tmp_path / "bad.dsm"
    bad.write_bytes(b"NOPE" + data[4:])
    assert run(capsys, "decode", bad, tmp_path / "o")[1]["error"] == "BadMagic"
    bad.write_bytes(data[:-7])
    assert run(capsys, "decode", bad, tmp_path / "o")[1]["error"] == "TruncatedStream"


def _trace(tmp_path, rows):
    path = tmp_path / "trace.csv"
    path.write_text("time_s,bandwidth_bps\n" + "".join(f"{t},{b}\n" for t, b in rows))
    return path


def test_simulate_high_and_zero_bandwidth(rigid, capsys, tmp_path):
    _, frames, stream = rigid
    report = tmp_path / "r.json"
    code, out = run(capsys, "simulate", stream, _trace(tmp_path, [(0, 1e9)]), report, "--reference", frames)
    assert code == 0 and out["total_rebuffer_s"] == 0.0 and out["mean_hausdorff"] == 0.0
    assert json.loads(report.read_text())["aggregates"].items() <= out.items()
    code, out = run(capsys, "simulate", stream, _trace(tmp_path, [(0, 0)]), report)
    assert code == 0 and out["delivered"] == 0
    assert out["total_rebuffer_s"] > out["playback_s"]


def test_simulate_lte_style_trace(rigid, capsys, tmp_path):
    root, frames, _ = rigid
    stream = tmp_path / "s10.dsm"
    assert run(capsys, "encode", frames, stream, "--ladder", "4,9", "--gof-length", "10")[0] == 0
    rows = [(t, 40e3 + 4e3 * (t % 5)) for t in range(8)]
    report, csv_path, plans = tmp_path / "r.json", tmp_path / "rows.csv", tmp_path / "p.jsonl"
    code, out = run(capsys, "simulate", stream, _trace(tmp_path, rows), report, "--csv", csv_path,
                    "--plans", plans, "--startup-buffer", "0.5")
    assert code == 0 and out["chunks"] == 3 and out["startup_delay_s"] == 0.5
    assert len(csv_path.read_text().strip().splitlines()) == 1 + 3
    assert len(plans.read_text().splitlines()) == 30


def test_simulate_bad_trace(rigid, capsys, tmp_path):
    _, _, stream = rigid
    trace = tmp_path / "t.csv"
    trace.write_text("0,1\n0,1\n")
    code, out = run(capsys, "simulate", stream, trace, tmp_path / "r.json")
    assert code == 1 and out["error"] == "NonMonotonicTime"


def test_bdrate_command(capsys, tmp_path):
    ref, test = tmp_path / "a.csv", tmp_path / "b.csv"
    RDCurve(((100.0, 0.4), (200.0, 0.3), (400.0, 0.2), (800.0, 0.1))).save(ref)
    RDCurve(((50.0, 0.4), (100.0, 0.3), (200.0, 0.2), (400.0, 0.1))).save(test)
    code, out = run(capsys, "bdrate", ref, test)
    assert code == 0 and out["bd_rate_percent"] == pytest.approx(-50.0, abs=1e-9)
    test.write_text("1,0.1\n")
    code, out = run(capsys, "bdrate", ref, test)
    assert code == 1 and out["error"] == "InsufficientPoints"


def test_profile_decode_command(rigid, capsys):
    _, frames, _ = rigid
    code, out = run(capsys, "profile-decode", frames / "frame_0000.obj", "--nodes", "3,6,12", "--repetitions", "1")
    assert code == 0 and out["node_counts"] == [3, 6, 12] and out["alpha"] >= 0


def test_commands_are_deterministic(rigid, capsys, tmp_path):
    _, frames, _ = rigid
    a, b = tmp_path / "a.dsm", tmp_path / "b.dsm"
    run(capsys, "encode", frames, a, "--ladder", "4")
    run(capsys, "encode", frames, b, "--ladder", "4")
    assert a.read_bytes() == b.read_bytes()


def test_messages_go_to_stderr(capsys, tmp_path):
    code = cli.main(["-v", "gen-synthetic", str(tmp_path / "g"), "--frames", "2", "--resolution", "4"])
    captured = capsys.readouterr()
    assert code == 0 and json.loads(captured.out)["frames"] == 2
    assert "wrote 2 frames" in captured.err
