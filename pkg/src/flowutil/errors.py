"""Exception hierarchy shared by every module."""


class FlowUtilError(Exception):
    """Base class; ``module`` names the subsystem that raised."""

    module = "flowutil"

    def __init__(self, *args, module=None):
        super().__init__(*args)
        if module is not None:
            self.module = module


class ConfigurationError(FlowUtilError, ValueError):
    module = "market_model"


class SimulationError(FlowUtilError, ArithmeticError):
    module = "market_model"


class ConstraintViolationError(FlowUtilError, ValueError):
    module = "market_model"


class GridMismatchError(FlowUtilError, ValueError):
    module = "market_model"


class MonotonicityError(FlowUtilError, ValueError):
    module = "flow_engine"


class RangeError(FlowUtilError, ValueError):
    """Query outside the representable (truncated) domain.

    ``interval`` carries the attainable range when it is a single interval.
    """

    module = "flow_engine"

    def __init__(self, message, interval=None, module=None):
        super().__init__(message, module=module)
        self.interval = interval


class IntegrabilityError(FlowUtilError, ArithmeticError):
    module = "utility_lab"


class ParameterError(FlowUtilError, ValueError):
    module = "utility_lab"


class PreconditionError(FlowUtilError, ValueError):
    module = "utility_lab"


class UnsupportedConfigurationError(FlowUtilError, ValueError):
    module = "verifier"


class SpecError(FlowUtilError, ValueError):
    module = "verifier"


class TruncationWarning(UserWarning):
    """Quadrature tail could not be integrated analytically."""

    def __init__(self, message, tail_bound=float("inf")):
        super().__init__(message)
        self.tail_bound = tail_bound
