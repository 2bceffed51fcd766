"""Exception hierarchy shared by all dualflow modules."""


class DualflowError(Exception):
    """Base class for every error raised by the package."""


class DomainError(DualflowError, ValueError):
    pass


class CapabilityError(DualflowError):
    pass


class RegularityError(DualflowError):
    """Raised when a utility violates a structural assumption numerically
    (no root for U'(x) = y, non-concavity, ...)."""


class ConcavityError(RegularityError):
    pass


class ModelError(DualflowError, ValueError):
    pass


class WeightError(DualflowError, ValueError):
    pass


class IntegrabilityError(DualflowError):
    pass


class DualityError(DualflowError):
    pass


class NumericsError(DualflowError):
    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class ExtrapolationError(DualflowError):
    def __init__(self, message, path=None, time_index=None):
        super().__init__(message)
        self.path = path
        self.time_index = time_index


class BlowUpError(DualflowError):
    """The inverse-flow SDE left its coefficient table before the horizon."""

    def __init__(self, message, count=0):
        super().__init__(message)
        self.count = count


class GridError(DualflowError):
    pass


class RepresentationError(DualflowError):
    pass


class ConfigError(DualflowError, ValueError):
    def __init__(self, message, fields=None):
        super().__init__(message)
        self.fields = dict(fields or {})
