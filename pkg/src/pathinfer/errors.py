"""Exception hierarchy. The CLI maps each family onto an exit code."""


class PathInferError(Exception):
    exit_code = 1


class ConfigError(PathInferError):
    exit_code = 1


class DataError(PathInferError):
    exit_code = 2


class GraphLoadError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class AdjacencyError(DataError):
    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class NumericError(PathInferError):
    exit_code = 3
