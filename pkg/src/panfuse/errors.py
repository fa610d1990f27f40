"""Exception hierarchy shared across the toolkit.

Every error raised on a documented failure path derives from PanfuseError so
the CLI can map it to a machine-readable report and a nonzero exit code.
"""


class PanfuseError(Exception):
    """Base class for all toolkit errors."""


class FormatError(PanfuseError):
    """Corrupt or unreadable file header / config syntax."""


class IntegrityError(PanfuseError):
    """Header and payload disagree (sizes, hashes, ids)."""


class GeometryError(PanfuseError):
    """Array shapes violate a documented geometric contract."""


class ValidationError(PanfuseError):
    """Values or arguments outside their documented domain."""


class ConfigError(PanfuseError):
    """Unknown or ill-typed configuration keys."""


class DependencyError(PanfuseError):
    """A required artifact (e.g. pretrained checkpoint) is missing."""


class LockError(PanfuseError):
    """Another process already holds the run-directory lock."""


class MetricUndefinedError(PanfuseError):
    """Metric has no defined value for the given inputs."""


class TrainingDivergenceError(PanfuseError):
    """Training produced a non-finite loss.

    Carries a diagnostics dict (step, loss terms, lr) so the harness can dump
    it next to the run artifacts.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
