"""Exception hierarchy shared by every stage of the pipeline."""


class GSAError(Exception):
    """Base class for all errors raised by lossgsa."""


class ConfigError(GSAError):
    pass


class ModelEvaluationError(GSAError):
    """The loss returned something that cannot be used (NaN, -inf)."""


class FeasibilityError(GSAError):
    """A parameter vector lies outside the feasible set."""


class CalibrationError(GSAError):
    pass


class NonExistenceError(CalibrationError):
    """The temperature equation has no root above the lower bracket end."""


class BracketError(CalibrationError):
    pass


class SamplerError(GSAError):
    pass


class StallError(SamplerError):
    pass


class DegenerateVarianceError(GSAError):
    pass


class AlignmentError(GSAError):
    pass


class PerturbationRangeError(GSAError):
    pass
