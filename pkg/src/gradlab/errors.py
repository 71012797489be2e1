"""Exception types shared across the package."""


class GradlabError(Exception):
    """Base class for every error raised by gradlab."""


class DimensionError(GradlabError):
    """Operand shapes do not conform for the requested operation."""


class NumericError(GradlabError):
    """An operation produced non-finite values (NaN or infinity)."""


class UsageError(GradlabError):
    """An API contract was violated by the caller."""


class BuildError(GradlabError):
    """A model specification does not compose into a valid network."""


class TrainingError(GradlabError):
    """Training diverged (non-finite loss)."""


class AttackError(GradlabError):
    """A reconstruction attack could not be run to completion."""


class LabelRecoveryError(GradlabError):
    """Analytic label recovery found no unambiguous candidate."""


class FormatError(GradlabError):
    """A dataset file does not match its declared on-disk format."""


class MetricError(GradlabError):
    """A metric is undefined for the given inputs."""
