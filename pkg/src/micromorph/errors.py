"""Exception hierarchy shared by all modules."""


class MicromorphError(Exception):
    """Base class for every error raised by the package."""


class NumericalFailure(MicromorphError):
    """Base class for failures of an iterative or numerical procedure."""


class NotOnBoundary(MicromorphError):
    pass


class PointOutsideDomain(MicromorphError):
    pass


class NonPositiveCoefficient(MicromorphError):
    pass


class InadmissibleShift(MicromorphError):
    """Shift vector outside the admissible cone or too long."""


class NoConvergence(NumericalFailure):
    pass


class LineSearchStall(NumericalFailure):
    pass


class NonPositiveGap(NumericalFailure):
    pass


class ZeroLoad(MicromorphError):
    pass


class EmptyInteriorRegion(MicromorphError):
    pass


class ConfigError(MicromorphError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
