"""Error hierarchy shared by every layer."""

from typing import List, Optional, Sequence


class RCMError(Exception):
    """Base class for all project errors."""


class DimensionError(RCMError, ValueError):
    """Operand shapes do not line up for the requested operation."""


class ShapeError(RCMError, ValueError):
    """A tensor has the wrong rank or size for its role (e.g. non-scalar loss)."""


class ParameterError(RCMError, ValueError):
    """An argument is outside its allowed range."""


class DegenerateInputError(RCMError, ValueError):
    """The input leaves nothing to compute over (empty mask, nothing sampled)."""


class LabelError(RCMError, ValueError):
    """A document lacks the ground-truth labels a relation kind needs."""


class CapacityError(RCMError, ValueError):
    """A document does not fit the sequence or entity budget."""


class StateError(RCMError):
    """Online and target parameter sets are out of alignment."""


class AugmentationFailedError(RCMError):
    """Every layout draw was rejected by the overlap check."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class CorpusParseError(RCMError, ValueError):
    """A corpus line is not a well-formed record."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class CorpusValidationError(RCMError, ValueError):
    """A corpus record breaks a document invariant."""

    def __init__(self, message: str, line_number: Optional[int] = None, entity_id: Optional[int] = None):
        where = []
        if line_number is not None:
            where.append(f"line {line_number}")
        if entity_id is not None:
            where.append(f"entity {entity_id}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.message = message
        self.line_number = line_number
        self.entity_id = entity_id


class NonFiniteLossError(RCMError):
    """A training loss became NaN or infinite."""

    def __init__(self, message: str, doc_ids: Sequence[str]):
        super().__init__(f"{message} (documents: {', '.join(doc_ids) or 'unknown'})")
        self.doc_ids = list(doc_ids)


class ConfigError(RCMError, ValueError):
    """The configuration failed validation; carries every problem found."""

    def __init__(self, problems: List[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = list(problems)


class CheckpointError(RCMError):
    """A checkpoint file is unreadable or malformed."""
