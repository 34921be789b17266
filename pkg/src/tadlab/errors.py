"""Exception and warning types shared across tadlab."""


class TadlabError(Exception):
    """Base class for all tadlab errors."""


class InvalidInputError(TadlabError, ValueError):
    """Input data violates a precondition (non-finite logits, bad token ids, ...)."""


class InvalidConfigError(TadlabError, ValueError):
    """A configuration value is out of its admissible range."""


class ShapeError(TadlabError, ValueError):
    """Arrays that must agree in shape do not."""


class NumericFailure(TadlabError, RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(TadlabError, IOError):
    """A checkpoint or token file could not be read."""


class DegenerateWarning(UserWarning):
    """A quantity hit the epsilon floor (empty teacher tail, zero mean tail mass, ...)."""


class BetaBelowOneWarning(UserWarning):
    """beta < 1 no longer guarantees that the tail weight exceeds one."""
