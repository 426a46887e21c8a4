"""Exception types shared across the package.

Every error that a caller is expected to branch on gets its own class so that
``except`` clauses never have to parse messages.
"""


class ConfrdError(Exception):
    """Base class for all package-specific errors."""


# ---------------------------------------------------------------- channels
class ZeroRow(ConfrdError):
    """A stimulus class has no trials and the policy forbids dropping it."""

    def __init__(self, row: int):
        self.row = row
        super().__init__(f"row {row} has zero trials")


class DiagonalOnly(ConfrdError):
    """Channel has no off-diagonal mass; off-diagonal asymmetry undefined."""


# ---------------------------------------------------------------- rd
class NotConverged(ConfrdError):
    """Blahut-Arimoto did not reach tolerance within the sweep budget.

    Carries the last iterate so the caller may accept it or reject it.
    """

    def __init__(self, result, iterations: int):
        self.result = result
        self.iterations = iterations
        super().__init__(f"not converged after {iterations} sweeps")


class DegenerateFrontier(ConfrdError):
    """Fewer than two usable finite-difference segments on the frontier."""


class OutOfBracket(ConfrdError):
    """Target rate is unreachable within the root-finding bracket."""


# ---------------------------------------------------------------- fit
class CollapsedInput(ConfrdError):
    """A collapse-flagged channel was passed to the distortion fitter."""


class NonFinite(ConfrdError):
    """The fit objective degenerated to a non-finite value."""


# ---------------------------------------------------------------- stats
class ZeroVariance(ConfrdError):
    """A sample or component is constant where variation is required."""


class DegenerateSample(ConfrdError):
    """All pooled values are identical; rank test undefined."""


class DegenerateProportions(ConfrdError):
    """Pooled proportion is 0 or 1; the z statistic is undefined."""


class RankDeficient(ConfrdError):
    """Design matrix does not have full column rank."""


class SliceTooSmall(ConfrdError):
    """A residualization slice has fewer than the minimum points."""


# ---------------------------------------------------------------- simgen
class NoKnee(ConfrdError):
    """Two-segment fit does not improve enough over a single line."""


# ---------------------------------------------------------------- cli
class SchemaMismatch(ConfrdError):
    """Input table header or cell contents violate the declared schema."""


class UnknownClass(ConfrdError):
    """A class label is absent from the declared vocabulary."""


class EmptyBlock(ConfrdError):
    """A block accumulated no positive counts."""


class ConfigInvalid(ConfrdError):
    """Configuration file or values cannot be used."""


class UnknownAnalysis(ConfrdError):
    """A report was requested for a group or analysis that does not exist."""
