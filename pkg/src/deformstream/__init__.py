"""Streaming of triangle-mesh sequences as embedded-deformation parameters."""

from .abr import AdaptationPlan, FrameOption, QoECoefficients, optimize_chunk, qoe
from .codec import BitrateLadder, decode_gof, decode_stream, deserialize_stream, encode_gof, encode_sequence, serialize_stream
from .deform_graph import DeformationParams, NodeGraph, apply_deformation, extract_node_graph
from .errors import DeformStreamError
from .mesh_core import MeshSequence, TriangleMesh, generate_synthetic_sequence, load_obj_sequence, read_obj, write_obj
from .metrics import RDCurve, bd_rate, hausdorff
from .netsim import BandwidthTrace, DecodeTimeModel, load_trace, profile_decode_time, simulate
from .registration import EnergyWeights, SolverOptions, solve_deformation

__version__ = "0.1.0"

__all__ = [
    "AdaptationPlan",
    "FrameOption",
    "QoECoefficients",
    "optimize_chunk",
    "qoe",
    "BitrateLadder",
    "decode_gof",
    "decode_stream",
    "deserialize_stream",
    "encode_gof",
    "encode_sequence",
    "serialize_stream",
    "DeformationParams",
    "NodeGraph",
    "apply_deformation",
    "extract_node_graph",
    "DeformStreamError",
    "MeshSequence",
    "TriangleMesh",
    "generate_synthetic_sequence",
    "load_obj_sequence",
    "read_obj",
    "write_obj",
    "RDCurve",
    "bd_rate",
    "hausdorff",
    "BandwidthTrace",
    "DecodeTimeModel",
    "load_trace",
    "profile_decode_time",
    "simulate",
    "EnergyWeights",
    "SolverOptions",
    "solve_deformation",
]
