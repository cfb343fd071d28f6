"""Exception types shared across the package."""


class TrafficGcnError(Exception):
    """Base class for package-specific errors."""


class ConfigError(TrafficGcnError, ValueError):
    """Invalid configuration value or incompatible parameter combination."""


class ScenarioFormatError(TrafficGcnError, ValueError):
    """Malformed scenario/manifest file or invariant violation on load."""


class ModelFormatError(TrafficGcnError, ValueError):
    """Malformed model file or tensor shapes inconsistent with its config."""


class UnknownAgentError(TrafficGcnError, KeyError):
    """An agent id that does not exist in the scenario."""


class GenerationError(TrafficGcnError, RuntimeError):
    """The generator cannot satisfy the requested configuration."""


class NumericError(TrafficGcnError, ArithmeticError):
    """Non-finite value encountered in a numeric computation."""


class TrainingDivergedError(NumericError):
    """Training loss or a gradient became non-finite."""


class EvaluationError(TrafficGcnError, RuntimeError):
    """Evaluation is impossible, e.g. required ground truth is missing."""
