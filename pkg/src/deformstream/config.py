"""Flat ``key = value`` run configuration shared by the command-line tools."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .abr import QoECoefficients
from .codec import BitrateLadder
from .deform_graph import WEIGHT_MODES
from .errors import ConfigError
from .netsim import DecodeTimeModel
from .registration import EnergyWeights, SolverOptions


@dataclass(frozen=True)
class RunConfig:
    lambda_align: float = 1.0
    lambda_rot: float = 1.0
    lambda_reg: float = 10.0
    mu1: float = 1.0
    mu2: float = 1.0
    mu3: float = 1.0
    latency_penalty: bool = True
    ladder: str = "L1:16,L2:64"
    gof_length: int = 30
    fps: int = 30
    tol: float = 1e-6
    max_iters: int = 50
    weight_mode: str = "uniform"
    startup_buffer_s: float = 1.0
    decode_alpha: float = 2e-6  # seconds per node
    decode_beta: float = 1e-3   # seconds per frame
    workers: int = 1

    def __post_init__(self):
        try:
            self.energy_weights()
            self.qoe_coefficients()
            self.bitrate_ladder()
            self.solver_options()
            self.decode_model()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.gof_length < 1 or self.fps < 1 or self.workers < 1:
            raise ConfigError("gof_length, fps and workers must be >= 1")
        if self.startup_buffer_s < 0:
            raise ConfigError("startup_buffer_s must be >= 0")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}")

    def energy_weights(self) -> EnergyWeights:
        return EnergyWeights(self.lambda_align, self.lambda_rot, self.lambda_reg)

    def qoe_coefficients(self) -> QoECoefficients:
        return QoECoefficients(self.mu1, self.mu2, self.mu3, self.latency_penalty)

    def bitrate_ladder(self) -> BitrateLadder:
        return BitrateLadder.parse(self.ladder)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(tol=self.tol, max_iters=self.max_iters, weight_mode=self.weight_mode)

    def decode_model(self) -> DecodeTimeModel:
        return DecodeTimeModel(self.decode_alpha, self.decode_beta)

    def updated(self, **overrides) -> "RunConfig":
        """Copy with the non-None ``overrides`` applied (values may be strings)."""
        kinds = {f.name: f.type for f in fields(self)}
        clean = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            clean[key] = _coerce(key, kinds[key], value) if isinstance(value, str) else value
        return replace(self, **clean)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, kind: str, text: str):
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return (base or RunConfig()).updated(**values)


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
