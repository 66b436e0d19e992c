"""Exception hierarchy shared by every module.

CLI exit codes are attached to the classes so the entry point can map any
failure to a stable status without inspecting messages.
"""


class PatchLoraError(Exception):
    exit_code = 1


class ContractError(PatchLoraError, ValueError):
    """A precondition or invariant of an operation was violated."""

    exit_code = 2


class DimensionError(ContractError):
    """Tensor shapes do not conform."""


class ProvenanceError(ContractError):
    """Evaluation data overlaps data that reached the optimizer."""


class DataError(PatchLoraError):
    exit_code = 3


class SchemaError(DataError, KeyError):
    """A required input column is missing."""

    def __str__(self):
        return Exception.__str__(self)


class FormatError(DataError):
    """A checkpoint has the wrong magic number or version."""


class CorruptionError(DataError):
    """A checkpoint is truncated or fails its checksum."""


class NumericError(PatchLoraError, ArithmeticError):
    exit_code = 4
