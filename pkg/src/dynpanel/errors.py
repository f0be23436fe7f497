"""Exception hierarchy.

Errors fall into three families that the command-line front end maps to
stable exit codes: data validation (2), estimation (3), configuration (4).
Simulation failures get their own family (5).
"""


class DynPanelError(Exception):
    """Base class for every error raised by this package."""


# -- data validation -------------------------------------------------------

class DataError(DynPanelError, ValueError):
    pass


class MissingColumn(DataError):
    def __init__(self, column, where="input"):
        self.column = column
        super().__init__(f"{where}: missing column {column!r}")


class DuplicateRow(DataError):
    def __init__(self, unit, date, line=None):
        self.unit = unit
        self.date = date
        self.line = line
        at = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate row for (unit, date) = ({unit}, {date}){at}")


class UnparseableDate(DataError):
    def __init__(self, value, line=None, column="date"):
        self.value = value
        self.line = line
        super().__init__(f"line {line}, column {column!r}: cannot parse date {value!r}")


class NonNumericValue(DataError):
    def __init__(self, value, line=None, column=None):
        self.value = value
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column!r}: non-numeric value {value!r}")


class InconsistentAttribute(DataError):
    def __init__(self, unit, column):
        super().__init__(f"attribute {column!r} varies within unit {unit!r}")


class NegativeCount(DataError):
    pass


class ZeroEnrollmentCounty(DataError):
    def __init__(self, county):
        self.county = county
        super().__init__(f"county {county!r} has zero total enrollment")


class InvalidRecord(DataError):
    pass


class AllSharesZero(DataError):
    pass


# -- estimation --------------------------------------------------------------

class EstimationError(DynPanelError):
    pass


class UnknownColumn(EstimationError, KeyError):
    def __init__(self, column):
        self.column = column
        super().__init__(column)

    def __str__(self):
        return f"unknown column {self.column!r}"


class EmptyAfterDeletion(EstimationError):
    pass


class NoConvergence(EstimationError):
    def __init__(self, delta, n_iter):
        self.delta = delta
        self.n_iter = n_iter
        super().__init__(
            f"demeaning did not converge after {n_iter} sweeps (last delta {delta:.3e})")


class RankDeficient(EstimationError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"design is rank deficient; {column!r} is collinear with "
                         "the other regressors or the fixed effects")


class SingleCluster(EstimationError):
    pass


class DegenerateClustering(EstimationError):
    pass


class TooFewUnits(EstimationError):
    pass


class NoSecondHalf(EstimationError):
    pass


class EmptyEventCell(EstimationError):
    def __init__(self, group, event_week):
        self.group = group
        self.event_week = event_week
        super().__init__(f"no observations for event cell (group={group!r}, week={event_week})")


class NoValidControl(EstimationError):
    def __init__(self, group, time):
        self.group = group
        self.time = time
        super().__init__(f"no valid control units for ATT(g={group}, t={time})")


# -- configuration -----------------------------------------------------------

class ConfigError(DynPanelError):
    pass


# -- simulation --------------------------------------------------------------

class SimulationError(DynPanelError):
    pass


class StepTooLarge(SimulationError):
    pass


class NegativeState(SimulationError):
    pass


class EpidemicDiesOut(UserWarning):
    """Warning: infections fell below one person in most units."""
