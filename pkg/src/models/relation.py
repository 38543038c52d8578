"""Relation matrix model."""

from enum import Enum
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.core.exceptions import ParameterError


class RelationKind(str, Enum):
    """Pairwise relations instantiated by the relation heads."""

    ROW = "row"
    COL = "col"
    KV = "kv"
    ORDER = "order"

    @classmethod
    def parse(cls, value: Any) -> "RelationKind":
        try:
            return cls(value.value if isinstance(value, Enum) else str(value))
        except ValueError:
            raise ParameterError(f"unknown relation kind {value!r}") from None


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array)
    array.setflags(write=False)
    return array


class RelationMatrix(BaseModel):
    """N x N scores for one relation kind plus their thresholded decisions.

    ``scores[i][j]`` and ``decisions[i][j]`` are indexed by entity id.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: RelationKind
    scores: np.ndarray
    decisions: np.ndarray
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)

    @field_validator("scores")
    @classmethod
    def _check_scores(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2 or value.shape[0] != value.shape[1]:
            raise ValueError(f"scores must be square, got shape {value.shape}")
        if not np.all((value >= 0.0) & (value <= 1.0)):
            raise ValueError("scores must lie in [0, 1]")
        return _frozen(value)

    @field_validator("decisions")
    @classmethod
    def _check_decisions(cls, value: np.ndarray) -> np.ndarray:
        return _frozen(np.asarray(value, dtype=bool))

    @model_validator(mode="after")
    def _check_consistency(self) -> "RelationMatrix":
        if self.decisions.shape != self.scores.shape:
            raise ValueError("decisions and scores differ in shape")
        if not np.array_equal(self.decisions, self.scores > self.threshold):
            raise ValueError("decisions must equal scores > threshold")
        return self

    @classmethod
    def from_scores(cls, kind: RelationKind, scores: np.ndarray, threshold: float = 0.5) -> "RelationMatrix":
        scores = np.asarray(scores, dtype=np.float64)
        return cls(kind=kind, scores=scores, decisions=scores > threshold, threshold=threshold)

    @classmethod
    def from_decisions(cls, kind: RelationKind, decisions: np.ndarray) -> "RelationMatrix":
        decisions = np.asarray(decisions, dtype=bool)
        return cls(kind=kind, scores=decisions.astype(np.float64), decisions=decisions)

    @property
    def n(self) -> int:
        return int(self.scores.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RelationMatrix):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.threshold == other.threshold
            and np.array_equal(self.scores, other.scores)
            and np.array_equal(self.decisions, other.decisions)
        )

    __hash__ = None  # type: ignore[assignment]
