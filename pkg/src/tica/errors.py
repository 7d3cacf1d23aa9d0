"""Exception hierarchy and CLI exit codes."""


class TicaError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(TicaError):
    exit_code = 2


class IoError(TicaError):
    exit_code = 4


class FormatError(TicaError):
    exit_code = 4


class MissingArtifact(TicaError):
    exit_code = 4


class DegenerateInput(TicaError):
    exit_code = 3


class InconsistentCohort(DegenerateInput):
    pass


class DimensionMismatch(DegenerateInput):
    pass


class RankDeficient(DegenerateInput):
    pass


class PerturbationOutOfGrid(DegenerateInput):
    pass


class NumericalError(TicaError):
    exit_code = 5


class SpaceTooLarge(ConfigError):
    """Latent configuration space exceeds the enumeration cap."""


class NonConvergence(UserWarning):
    """Emitted (not raised) when an iterative solver hits its iteration cap."""


class LowOrder(UserWarning):
    """Estimated model order is below the number of template components."""
