"""Exception hierarchy shared by every dc3 subsystem."""


class Dc3Error(Exception):
    pass


class DimensionError(Dc3Error, ValueError):
    pass


class NumericError(Dc3Error, FloatingPointError):
    pass


class ContractError(Dc3Error, ValueError):
    pass


class GenerationError(Dc3Error):
    pass


class FormatError(Dc3Error, ValueError):
    pass


class CompletionError(Dc3Error):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class CorrectionError(Dc3Error):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingError(Dc3Error):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class SolverError(Dc3Error):
    pass


class LabelingError(Dc3Error):
    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


class ParseError(Dc3Error, ValueError):
    def __init__(self, message, line=None, table=None):
        where = []
        if table is not None:
            where.append(f"table {table}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.table = table


class UnsupportedCostError(Dc3Error, ValueError):
    pass
