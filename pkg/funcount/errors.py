# funcount/errors.py


class FuncountError(Exception):
    """Base class for every error raised by the funcount package."""

    def __init__(self, module: str, message: str):
        self.module = module
        super().__init__(f"{module}: {message}")


class InputFormatError(FuncountError, ValueError):
    """Structural problems with inputs: lengths, file contents, levels, ids."""


class PreconditionError(FuncountError, ValueError):
    """A documented precondition of an operation does not hold."""


class RankDeficiencyError(PreconditionError):
    def __init__(self, module: str, aliased_columns: list[str]):
        self.aliased_columns = list(aliased_columns)
        super().__init__(
            module,
            "design matrix is rank deficient; aliased columns: "
            + ", ".join(self.aliased_columns),
        )


class ConvergenceError(FuncountError, RuntimeError):
    """An iterative solver stopped without meeting its tolerance."""

    def __init__(self, module: str, message: str, last_iterate=None, subject_ids=None):
        self.last_iterate = last_iterate
        self.subject_ids = list(subject_ids) if subject_ids is not None else []
        super().__init__(module, message)
