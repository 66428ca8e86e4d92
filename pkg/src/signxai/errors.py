"""Exception hierarchy. Each family maps to one CLI exit code."""


class SignXAIError(Exception):
    exit_code = 1


class ConfigError(SignXAIError, ValueError):
    exit_code = 2


class DataError(SignXAIError, ValueError):
    exit_code = 3


class NumericError(SignXAIError, ArithmeticError):
    exit_code = 4


class ArtifactIOError(SignXAIError, OSError):
    exit_code = 5


class WeightsFetchError(ArtifactIOError):
    """Pretrained weights could not be obtained. Never silently replaced by random init."""


class CapabilityError(SignXAIError, TypeError):
    exit_code = 2


# Distinct from every failure code: the run finished but an attribution
# failed its additivity check.
EXIT_ADDITIVITY_WARNING = 6
