"""Errors raised by expertbits.

Every error carries a stable ``code`` so the command line can report it as
machine-readable JSON.
"""


class ExpertBitsError(Exception):
    code = "error"

    def to_json(self) -> dict[str, str]:
        return {"error": self.code, "message": str(self)}


class InvalidArgumentError(ExpertBitsError):
    code = "invalid-argument"


class InvalidTensorError(ExpertBitsError):
    code = "invalid-tensor"


class NonFiniteError(InvalidTensorError):
    code = "non-finite"


class ShapeMismatchError(ExpertBitsError):
    code = "shape-mismatch"


class DuplicateExpertError(ExpertBitsError):
    code = "duplicate-expert"


class UndefinedStatisticError(ExpertBitsError):
    code = "undefined-statistic"


class InfeasibleBudgetError(ExpertBitsError):
    code = "infeasible-budget"


class TrainingDivergedError(ExpertBitsError):
    code = "training-diverged"


class ExperimentFailedError(ExpertBitsError):
    code = "experiment-failed"


class MissingFileError(ExpertBitsError):
    code = "missing-file"


class BadMagicError(ExpertBitsError):
    code = "bad-magic"


class PayloadLengthError(ExpertBitsError):
    code = "payload-length-mismatch"


class UnsupportedDtypeError(ExpertBitsError):
    code = "unsupported-dtype"


class ManifestError(ExpertBitsError):
    code = "bad-manifest"


class SchemaError(ExpertBitsError):
    code = "schema-violation"


class FileAccessError(ExpertBitsError):
    code = "io-error"
