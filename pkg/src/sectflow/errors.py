"""Exception hierarchy shared by all modules."""


class SectflowError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(SectflowError, ValueError):
    pass


class BlowUpError(SectflowError, ArithmeticError):
    def __init__(self, step, norm):
        super().__init__(f"orbit diverged at step {step} (|x| = {norm:.3g})")
        self.step = step
        self.norm = norm


class SingularityError(SectflowError, ValueError):
    """No normal plane: the base point is (numerically) a singularity."""


class CocycleDomainError(SectflowError, ValueError):
    pass


class ProjectionDomainError(SectflowError, ValueError):
    """The flow line through a point does not cross the target normal plane in the allowed window."""


class SplittingEstimationError(SectflowError, ValueError):
    pass


class HypothesisViolation(SectflowError, ValueError):
    pass


class UnsupportedSystemError(SectflowError, TypeError):
    pass


class HyperbolicityTooWeakError(SectflowError, ArithmeticError):
    pass


class DependencyError(SectflowError, FileNotFoundError):
    pass
