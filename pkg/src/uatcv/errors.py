"""Exception hierarchy shared by all modules.

Every error carries a short machine-readable ``code`` used by the CLI to
produce structured error lines and exit codes.
"""

from __future__ import annotations


class UatcvError(Exception):
    """Base class for all library errors."""

    code = "error"


class ShapeError(UatcvError):
    """Dimensions do not conform (tensor shapes, matrix products, windows)."""

    code = "shape"


class CapacityError(UatcvError):
    """A value would exceed the configured element cap."""

    code = "capacity"


class RangeError(UatcvError):
    """A numeric argument is outside its admissible range."""

    code = "range"


class RankError(UatcvError):
    """A low-rank update has an inadmissible rank."""

    code = "rank"


class SpecError(UatcvError):
    """A network description asks for something the pipeline cannot do."""

    code = "spec"


class ParseError(UatcvError):
    """Malformed network description file."""

    code = "parse"


class ValidationError(UatcvError):
    """Well-formed description that violates shape chaining or field rules."""

    code = "validation"


class VerificationError(UatcvError):
    """A verification trial exceeded its tolerance."""

    code = "verify"
