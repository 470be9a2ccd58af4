"""Exception hierarchy shared across the package.

All data / numerical errors raised by this package derive from ``TropError``
so callers (and the CLI) can distinguish bad input from genuine bugs.
"""


class TropError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(TropError):
    """Malformed input file (bad header, unparseable value, duplicate cell)."""


class UnbalancedPanel(TropError):
    """Panel is missing (unit, time) cells.

    Carries the list of missing pairs in ``missing``.
    """

    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(f"({u},{t})" for u, t in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" and {len(self.missing) - 10} more"
        super().__init__(f"panel is missing {len(self.missing)} cells: {shown}{more}")


class NonBinaryTreatment(TropError):
    """Treatment indicator contains values other than 0 or 1."""


class DegenerateOutcome(TropError):
    """Outcome has zero variance; cannot normalize."""


class NoSharedControlPeriods(TropError):
    """Two units share no period in which both are under control."""


class AllZeroWeights(TropError):
    """Weight vector has no positive entry on the requested support."""


class EmptyRowOrColumn(TropError):
    """A unit or period has zero total loss weight (strict mode only)."""


class NonConvergence(TropError):
    """Solver hit its iteration cap (strict mode only; the default path
    returns the best iterate flagged ``converged=False`` instead)."""


class RankDeficientCovariates(TropError):
    """Weighted covariate Gram matrix is singular."""


class NoTreatedCells(TropError):
    """Panel contains no treated cells; there is nothing to estimate."""


class NotBlockDesign(TropError):
    """Estimator requires block (treated-units x treated-periods) assignment."""


class InsufficientControls(TropError):
    """Requested number of treated units leaves no controls."""


class NonStationaryAR(TropError):
    """Fitted AR(2) coefficients are non-stationary (raised only when
    clipping is disabled)."""


class SeparationInLogistic(TropError):
    """Perfect separation in the assignment logit (raised only when the
    ridge fallback is disabled)."""


class DegenerateResample(TropError):
    """Bootstrap draw produced all-identical control rows repeatedly."""


class InfeasibleSweepValue(TropError):
    """Sweep value exceeds what the seed design can support."""


class TooFewPeriods(TropError):
    """Diagnostic requires more time periods than the panel has."""


class WeightsNotNormalized(TropError):
    """Balancing weights must sum to one on their support."""
