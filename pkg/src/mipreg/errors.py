"""Exception hierarchy shared by all mipreg modules."""


class MipRegError(Exception):
    """Base class for every error raised by this package."""


# geometry
class NotPositiveDefinite(MipRegError):
    pass


class NotARotation(MipRegError):
    pass


class Singular(MipRegError):
    pass


class EmptyMesh(MipRegError):
    pass


class DegenerateNeighborhood(MipRegError):
    pass


class DegenerateConfiguration(MipRegError):
    """Too few or collinear support points for a rigid fit."""


class ParseError(MipRegError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


# milp
class BadBounds(MipRegError):
    pass


class UnknownVariable(MipRegError):
    pass


class InvalidModel(MipRegError):
    pass


class NumericalFailure(MipRegError):
    pass


class PartitionTooCoarse(MipRegError):
    pass


# registration
class MissingCovariances(MipRegError):
    pass


class EmptyBand(MipRegError):
    pass


class InfeasibleModel(MipRegError):
    pass


class ConfigError(MipRegError):
    """Invalid manifest or pipeline configuration; ``field`` names the culprit."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message)


class StageError(MipRegError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
