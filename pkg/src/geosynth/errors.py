"""Exception hierarchy shared across the toolkit."""


class GeoSynthError(Exception):
    """Base class for all errors raised by geosynth."""


class SchemaMismatch(GeoSynthError):
    pass


class ParseError(GeoSynthError):
    pass


class DegeneratePolygon(GeoSynthError):
    pass


class SpecInvalid(GeoSynthError):
    pass


class InsufficientPsus(GeoSynthError):
    pass


class InsufficientHouseholds(GeoSynthError):
    pass


class RejectionBudgetExceeded(GeoSynthError):
    def __init__(self, message, counts=None):
        super().__init__(message)
        # per-constraint rejection counts, when known
        self.counts = dict(counts or {})


class UnknownCluster(GeoSynthError):
    pass


class EmptyColumn(GeoSynthError):
    pass


class UnknownClass(GeoSynthError):
    pass


class SmallSample(GeoSynthError):
    def __init__(self, message, unit=None):
        super().__init__(message)
        self.unit = unit


class NumericalFailure(GeoSynthError):
    pass


class SingularConditioner(GeoSynthError):
    pass


class SingularCovariance(GeoSynthError):
    pass


class DegenerateStratum(GeoSynthError):
    pass


class TooFewAreas(GeoSynthError):
    pass


class InsufficientData(GeoSynthError):
    pass


class NoConvergence(GeoSynthError):
    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class RankDeficientDesign(GeoSynthError):
    pass


class MissingCovariates(GeoSynthError):
    pass
