"""Typed error hierarchy shared across the package.

Every error class carries a distinct process exit code so the CLI can map
failures to stable, scriptable statuses.
"""


class F2HDRError(Exception):
    """Base class for all package errors."""

    exit_code = 1


# --- file format errors ---

class BadMagic(F2HDRError):
    exit_code = 10


class BadHeader(F2HDRError):
    exit_code = 11


class TruncatedFile(F2HDRError):
    exit_code = 12


class NonFiniteValues(F2HDRError):
    exit_code = 13


class VersionMismatch(F2HDRError):
    exit_code = 14


class ShapeOverflow(F2HDRError):
    exit_code = 15


# --- manifest / sequence errors ---

class MissingFrameFile(F2HDRError):
    exit_code = 16


class NonAlternatingExposures(F2HDRError):
    exit_code = 17


class FewerThanThreeFrames(F2HDRError):
    exit_code = 18


# --- value / shape contract errors ---

class DimMismatch(F2HDRError):
    exit_code = 19


class NonPositiveExposure(F2HDRError):
    exit_code = 20


class NegativeInput(F2HDRError):
    exit_code = 21


class MissingParams(F2HDRError):
    exit_code = 22


class ShapeMismatch(F2HDRError):
    exit_code = 23


class IngestFileMissing(F2HDRError):
    exit_code = 24


def diagnostic_line(err: F2HDRError) -> str:
    """One-line structured diagnostic, stable enough to grep in scripts."""
    return f"f2hdr: error={type(err).__name__} exit={err.exit_code} detail={err}"
