"""``deformstream`` command-line tool.

Machine-readable output (JSON) goes to stdout, progress and messages to
stderr. Exit status: 0 success, 1 input or domain error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import codec, mesh_core, netsim
from .config import RunConfig, load_config
from .errors import ConfigError, DeformStreamError, MalformedRow, SizeMismatch
from .metrics import RDCurve, bd_rate, sequence_hausdorff

log = logging.getLogger("deformstream")

SHAPES = {
    "grid": lambda n: mesh_core.grid_mesh(n, n),
    "cylinder": lambda n: mesh_core.cylinder_mesh(n, 2 * n),
    "sphere": lambda n: mesh_core.uv_sphere(n, 2 * n),
}


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    for key in ("ladder", "gof_length", "fps", "weight_mode", "workers", "startup_buffer_s"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return cfg.updated(**overrides)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


# ---------------------------------------------------------------- commands

def cmd_gen_synthetic(args) -> int:
    base = SHAPES[args.shape](args.resolution)
    seq = mesh_core.generate_synthetic_sequence(args.kind, base, args.frames, args.magnitude, args.fps)
    mesh_core.write_obj_sequence(seq, args.output, args.pattern)
    log.info("wrote %d frames to %s", len(seq), args.output)
    _emit({"frames": len(seq), "vertices": base.vertex_count, "faces": base.face_count, "output": str(args.output)})
    return 0


def cmd_encode(args) -> int:
    cfg = _config(args)
    seq = mesh_core.load_obj_sequence(args.input, args.pattern, cfg.fps)
    ladder = cfg.bitrate_ladder()
    log.info("encoding %d frames, ladder %s, GoF %d", len(seq), ladder, cfg.gof_length)
    gofs = codec.encode_sequence(seq, ladder, cfg.energy_weights(), cfg.solver_options(), cfg.gof_length, cfg.workers)
    data = codec.serialize_stream(gofs)
    Path(args.output).write_bytes(data)
    per_gof = []
    start = 0
    for enc in gofs:
        table = codec.measure_sizes(enc, seq.frames[start:start + enc.gof_length])
        per_gof.append({"frames": enc.gof_length, "i_frame_bytes": table.raw[0], "raw_bytes": table.raw,
                        "graph_bytes": table.graph_bytes, "p_bytes": table.p})
        start += enc.gof_length
    _emit({"output": str(args.output), "stream_bytes": len(data), "gofs": len(gofs), "frames": len(seq),
           "ladder": {lv.label: lv.node_count for lv in ladder.levels}, "per_gof": per_gof})
    return 0


def read_plan(path, frame_count: int) -> list[str]:
    """Per-frame labels from a JSON-lines plan (``frame``, ``kind``, ``level``)."""
    labels: dict[int, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                frame = int(row["frame"])
                raw = row.get("kind") == "raw" or row.get("level") is None
                labels[frame] = codec.RAW_LABEL if raw else str(row["level"])
            except (ValueError, KeyError, TypeError):
                raise MalformedRow(lineno, "plan rows need frame, kind and level") from None
    missing = [t for t in range(frame_count) if t not in labels]
    if missing:
        raise SizeMismatch(f"plan has no entry for frames {missing[:5]}")
    return [labels[t] for t in range(frame_count)]


def cmd_decode(args) -> int:
    cfg = _config(args)
    gofs = codec.deserialize_stream(Path(args.stream).read_bytes())
    total = sum(g.gof_length for g in gofs)
    reference = mesh_core.load_obj_sequence(args.reference, args.pattern) if args.reference else None
    if args.plan:
        labels = read_plan(args.plan, total)
    else:
        level = args.level or gofs[0].ladder.labels[-1]
        labels = [level] * total
    decoded = codec.decode_stream(gofs, labels, cfg.weight_mode, reference.frames if reference else None)
    mesh_core.write_obj_sequence(decoded, args.output, args.pattern)
    payload = {"output": str(args.output), "frames": len(decoded), "levels": labels}
    if reference is not None:
        payload["hausdorff"] = sequence_hausdorff(decoded.frames, reference.frames)
    _emit(payload)
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    gofs = codec.deserialize_stream(Path(args.stream).read_bytes())
    trace = netsim.load_trace(args.trace)
    if args.reference:
        reference = mesh_core.load_obj_sequence(args.reference, args.pattern).frames
    else:
        # without ground truth, distortion is measured against the densest level
        reference = codec.decode_stream(gofs, gofs[0].ladder.labels[-1], cfg.weight_mode).frames
    profiles = netsim.profile_stream(gofs, reference, cfg.weight_mode)
    report = netsim.simulate(profiles, trace, cfg.qoe_coefficients(), cfg.decode_model(),
                             cfg.startup_buffer_s, gofs[0].fps, workers=cfg.workers)
    report_path = Path(args.report)
    report_path.write_text(report.to_json(), encoding="utf-8")
    csv_path = Path(args.csv) if args.csv else report_path.with_suffix(".csv")
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    if args.plans:
        Path(args.plans).write_text(report.plans_jsonl(), encoding="utf-8")
    log.info("rebuffer %.3f s over %d chunks", report.total_rebuffer_s, len(report.chunks))
    _emit({"report": str(report_path), "csv": str(csv_path), **report.aggregates()})
    return 0


def cmd_bdrate(args) -> int:
    value = bd_rate(RDCurve.load(args.reference), RDCurve.load(args.test))
    _emit({"bd_rate_percent": value})
    return 0


def cmd_profile_decode(args) -> int:
    mesh = mesh_core.read_obj(args.mesh)
    counts = [int(x) for x in args.nodes.split(",") if x.strip()]
    model = netsim.profile_decode_time(mesh, counts, args.repetitions, weight_mode=args.weight_mode)
    _emit({"alpha": model.alpha, "beta": model.beta, "r2": model.fit_r2,
           "node_counts": list(model.node_counts), "seconds": list(model.seconds)})
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformstream", description="Deformation-based mesh sequence streaming.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic OBJ sequence")
    p.add_argument("output")
    p.add_argument("--kind", choices=mesh_core.SYNTHETIC_KINDS, default="bend")
    p.add_argument("--shape", choices=sorted(SHAPES), default="cylinder")
    p.add_argument("--resolution", type=int, default=12)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--pattern", default="frame_%04d.obj")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("encode", help="encode an OBJ sequence into a stream file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--pattern", default="frame_%04d.obj")
    p.add_argument("--ladder")
    p.add_argument("--gof-length", dest="gof_length", type=int)
    p.add_argument("--fps", type=int)
    p.add_argument("--workers", type=int)
    _add_config_args(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a stream file into OBJ frames")
    p.add_argument("stream")
    p.add_argument("output")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--level", help="ladder label used for every P-frame (default: densest)")
    group.add_argument("--plan", help="JSON-lines plan giving a level per frame")
    p.add_argument("--reference", help="directory of ground-truth OBJ frames")
    p.add_argument("--pattern", default="frame_%04d.obj")
    p.add_argument("--weight-mode", dest="weight_mode")
    _add_config_args(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("simulate", help="stream over a bandwidth trace")
    p.add_argument("stream")
    p.add_argument("trace")
    p.add_argument("report", help="JSON report path")
    p.add_argument("--csv", help="per-chunk CSV path (default: report path with .csv)")
    p.add_argument("--plans", help="write the chosen per-frame plans as JSON lines")
    p.add_argument("--reference", help="directory of ground-truth OBJ frames")
    p.add_argument("--pattern", default="frame_%04d.obj")
    p.add_argument("--startup-buffer", dest="startup_buffer_s", type=float)
    p.add_argument("--workers", type=int)
    _add_config_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bdrate", help="BD-rate of a test R-D curve against a reference")
    p.add_argument("reference")
    p.add_argument("test")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("profile-decode", help="fit the linear decode-time model on a mesh")
    p.add_argument("mesh")
    p.add_argument("--nodes", default="120,500,1000,2000,4600")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--weight-mode", dest="weight_mode", default="uniform")
    p.set_defaults(func=cmd_profile_decode)
    return parser


def _setup_logging(verbose: bool) -> None:
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except DeformStreamError as exc:
        _emit(exc.to_dict())
        log.error("%s", exc)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)})
        log.error("%s", exc)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected failures
        _emit({"error": "InternalError", "message": f"{type(exc).__name__}: {exc}"})
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
