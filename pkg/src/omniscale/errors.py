"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class InfeasibleBudgetError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class ParseError(ValueError):
    """Malformed dataset file. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyDatasetError(ParseError):
    pass


class UnsupportedFormatError(ParseError):
    pass


class MissingValuesError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, seed=None):
        self.epoch = epoch
        self.seed = seed
        super().__init__(f"loss became non-finite at epoch {epoch}" + (f" (seed {seed})" if seed is not None else ""))


class RunAbortedError(RuntimeError):
    """A protocol run stopped early; ``partial`` holds the results gathered so far."""

    def __init__(self, message, partial):
        self.partial = partial
        super().__init__(message)


class DatasetNotFoundError(FileNotFoundError):
    pass
