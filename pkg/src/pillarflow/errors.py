"""Exception types shared across pillarflow."""


class PillarFlowError(Exception):
    pass


class InvalidShape(PillarFlowError, ValueError):
    pass


class TooFewPoints(PillarFlowError, ValueError):
    pass


class Degenerate(PillarFlowError, ValueError):
    pass


class EmptySweep(PillarFlowError, ValueError):
    pass


class EmptyCluster(PillarFlowError, ValueError):
    pass


class NoValidCells(PillarFlowError, ValueError):
    pass


class SingularInnovation(PillarFlowError, ArithmeticError):
    pass


class RankDeficient(PillarFlowError, ArithmeticError):
    pass


class ConfigError(PillarFlowError, ValueError):
    pass


class FormatError(PillarFlowError, ValueError):
    """Malformed file. Carries the section name and the byte offset of the problem."""

    def __init__(self, message, section=None, offset=None):
        self.section = section
        self.offset = offset
        where = []
        if section is not None:
            where.append(f"section {section}")
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
