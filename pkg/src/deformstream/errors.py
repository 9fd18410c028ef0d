"""Exception hierarchy shared by every deformstream module.

All domain errors derive from :class:`DeformStreamError` so the CLI can map
them to exit status 1 and a machine-readable JSON payload.
"""

from __future__ import annotations


class DeformStreamError(Exception):
    """Base class for input and domain errors."""

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


# mesh I/O and geometry

class MissingDirectory(DeformStreamError, FileNotFoundError):
    pass


class MalformedObj(DeformStreamError, ValueError):
    def __init__(self, line: int, reason: str, path: str | None = None):
        self.line = line
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"malformed OBJ at {where}: {reason}")


class InconsistentTopology(DeformStreamError, ValueError):
    def __init__(self, frame: int, reason: str = "topology differs from frame 0"):
        self.frame = frame
        super().__init__(f"frame {frame}: {reason}")


class InvalidMesh(DeformStreamError, ValueError):
    pass


class InvalidKind(DeformStreamError, ValueError):
    pass


class IsolatedVertex(DeformStreamError, ValueError):
    def __init__(self, index: int, reason: str = "not referenced by any face"):
        self.index = index
        super().__init__(f"vertex {index} {reason}")


class EmptyMesh(DeformStreamError, ValueError):
    pass


# deformation graph and registration

class NodeCountOutOfRange(DeformStreamError, ValueError):
    pass


class SizeMismatch(DeformStreamError, ValueError):
    pass


class SingularRotation(DeformStreamError, ValueError):
    def __init__(self, node: int):
        self.node = node
        super().__init__(f"node {node} has a singular linear part")


class NonFiniteEnergy(DeformStreamError, ArithmeticError):
    pass


# codec

class MissingLevel(DeformStreamError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class BadMagic(DeformStreamError, ValueError):
    pass


class UnsupportedVersion(DeformStreamError, ValueError):
    pass


class TruncatedStream(DeformStreamError, ValueError):
    def __init__(self, offset: int, what: str = "record"):
        self.offset = offset
        super().__init__(f"stream truncated in {what} starting at byte {offset}")


class CorruptStream(DeformStreamError, ValueError):
    pass


# adaptation and simulation

class InfeasibleBudget(DeformStreamError, ValueError):
    pass


class MalformedRow(DeformStreamError, ValueError):
    def __init__(self, line: int, reason: str):
        self.line = line
        super().__init__(f"line {line}: {reason}")


class NonMonotonicTime(DeformStreamError, ValueError):
    def __init__(self, line: int):
        self.line = line
        super().__init__(f"line {line}: timestamps must be strictly increasing")


# metrics

class InsufficientPoints(DeformStreamError, ValueError):
    pass


class NoOverlap(DeformStreamError, ValueError):
    pass


class ConfigError(DeformStreamError, ValueError):
    pass
