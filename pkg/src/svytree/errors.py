"""Exception hierarchy.

Every error carries its class name so the command line can report it in a
machine-readable form.
"""


class SurveyError(Exception):
    """Base class for all toolkit errors."""

    @property
    def name(self) -> str:
        return type(self).__name__


# frame
class MissingHeader(SurveyError):
    pass


class UnknownLevel(SurveyError):
    def __init__(self, column, value, row=None):
        self.column, self.value, self.row = column, value, row
        where = f" (row {row})" if row is not None else ""
        super().__init__(f"unknown level {value!r} for column {column!r}{where}")


class MissingValue(SurveyError):
    def __init__(self, row, column):
        self.row, self.column = row, column
        super().__init__(f"missing value at row {row}, column {column!r}")


class NonNumeric(SurveyError):
    def __init__(self, row, column, value=None):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"non-numeric value {value!r} at row {row}, column {column!r}")


class SchemaError(SurveyError):
    pass


class EmptyPopulation(SurveyError):
    pass


class InvalidCellMean(SurveyError):
    pass


class UnknownVariable(SurveyError):
    pass


# design
class OversampledStratum(SurveyError):
    pass


class NonpositiveSize(SurveyError):
    pass


class ZeroInclusionProbability(SurveyError):
    pass


class InfeasibleDesign(SurveyError):
    pass


# tree
class EmptyNode(SurveyError):
    pass


class EmptySample(SurveyError):
    pass


class TreeFormatError(SurveyError):
    pass


# estimate
class LengthMismatch(SurveyError):
    pass


class NonpositiveWeight(SurveyError):
    pass


class PredictionFailure(SurveyError):
    pass


class SingularSystem(SurveyError):
    pass


class EmptySampleBox(SurveyError):
    pass


class IdentityViolation(SurveyError):
    """Two algebraically equal forms of an estimator disagreed."""


# mc
class EmptyVector(SurveyError):
    pass


class InsufficientSampleSizes(SurveyError):
    pass


# cli
class ConfigError(SurveyError):
    pass
