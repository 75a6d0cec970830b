"""Exception hierarchy shared by every oscillab module."""

from __future__ import annotations


class OscillabError(Exception):
    """Base class. ``code`` is the stable identifier emitted in CLI error JSON."""

    code = "OscillabError"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self), **self.details}


def _make(name: str, doc: str) -> type:
    return type(name, (OscillabError,), {"code": name, "__doc__": doc})


# sl2core
NotElliptic = _make("NotElliptic", "A traceless matrix with det <= 0 was given where det > 0 is required.")
DegenerateA02 = _make("DegenerateA02", "Elliptic normalization needs a nonzero upper-right entry.")
ZeroDilation = _make("ZeroDilation", "Dilation parameter must be nonzero.")

# qpfun
WidthExceeded = _make("WidthExceeded", "Requested strip width exceeds the width the series was declared on.")
StepTooLarge = _make("StepTooLarge", "RK4 determinant drift signals a step size that is too coarse.")

# metaengine
TailEscape = _make("TailEscape", "State mass reached the grid boundary.")
NormCapExceeded = _make("NormCapExceeded", "Matrix norm is above the configured cap for this grid.")
GridError = _make("GridError", "Grid size or spacing is invalid.")

# sobolev
TruncationTail = _make("TruncationTail", "Hermite expansion has too much weight in its last coefficients.")
ZeroState = _make("ZeroState", "Operation undefined for the zero state.")
NotConverged = _make("NotConverged", "Power iteration did not reach tolerance.")

# akbuilder
SearchExhausted = _make("SearchExhausted", "No admissible lattice vector inside the search box.")
InfeasibleDepth = _make("InfeasibleDepth", "Requested schedule depth cannot be represented.")
PrecisionExhausted = _make("PrecisionExhausted", "Log-space arithmetic could not certify an inequality.")
DepthExceeded = _make("DepthExceeded", "Index is beyond the depth of the schedule.")
NormBudgetExceeded = _make("NormBudgetExceeded", "Assembled perturbation majorant is not below eps.")

# kamengine
SmallDivisorBlowup = _make("SmallDivisorBlowup", "Divisor below 1e-14 outside the resonant set.")
Stalled = _make("Stalled", "No contraction for three consecutive KAM steps.")

# cli
UnknownKey = _make("UnknownKey", "Configuration key is not recognised.")
TypeMismatch = _make("TypeMismatch", "Configuration value has the wrong type or range.")
MissingRequired = _make("MissingRequired", "A required configuration value is missing.")
