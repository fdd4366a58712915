"""Exception hierarchy shared by every pipeline."""


class AutodesignError(Exception):
    """Base class for all errors raised by this package."""


class InputError(AutodesignError, ValueError):
    """Malformed argument: wrong shape, out-of-range value, bad probability vector."""


class UsageError(AutodesignError, RuntimeError):
    """API called in the wrong state (stale trace, replay sampled before warmup)."""


class TrainingError(AutodesignError):
    """Training diverged."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class SearchError(TrainingError):
    """Architecture search produced a non-finite loss."""


class BudgetError(AutodesignError):
    """A resource budget cannot be met even by the most aggressive policy."""


class PolicyError(AutodesignError, KeyError):
    """A policy does not cover every parametric layer of a network."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class SearchSpaceTooLarge(AutodesignError):
    """Exhaustive enumeration refused because the space exceeds the cap."""


class ConfigError(AutodesignError, ValueError):
    """Experiment configuration is invalid."""
