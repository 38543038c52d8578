"""Document models."""

import math
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

PAGE_SIZE = 1000
TOKEN_PREFIX = "w"


class EntityInvariantError(ValueError):
    """A document invariant fails at a specific entity."""

    def __init__(self, entity_id: int, message: str):
        super().__init__(f"entity {entity_id}: {message}")
        self.entity_id = entity_id


class DocumentKind(str, Enum):
    """Kinds of synthetic documents."""

    TABLE = "table"
    FORM = "form"
    PARAGRAPHS = "paragraphs"


class BBox(BaseModel):
    """Bounding box on the normalised 0-1000 page grid."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    x0: int
    y0: int
    x1: int
    y1: int

    @model_validator(mode="after")
    def _check_extent(self) -> "BBox":
        if not (0 <= self.x0 < self.x1 <= PAGE_SIZE and 0 <= self.y0 < self.y1 <= PAGE_SIZE):
            raise ValueError(f"bbox ({self.x0}, {self.y0}, {self.x1}, {self.y1}) is empty or off the page")
        return self

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def x_overlaps(self, other: "BBox") -> bool:
        return min(self.x1, other.x1) > max(self.x0, other.x0)

    def y_overlaps(self, other: "BBox") -> bool:
        return min(self.y1, other.y1) > max(self.y0, other.y0)

    def overlaps(self, other: "BBox") -> bool:
        """True when the boxes share a region of positive area."""
        return self.x_overlaps(other) and self.y_overlaps(other)

    def layout_features(self) -> np.ndarray:
        """(x0, y0, x1, y1, w, h) scaled to [0, 1]."""
        return np.array([self.x0, self.y0, self.x1, self.y1, self.width, self.height], dtype=np.float64) / PAGE_SIZE


class Entity(BaseModel):
    """A text span with its box and image crop."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    id: int = Field(..., ge=0)
    tokens: Tuple[int, ...] = Field(..., min_length=1)
    bbox: BBox
    patch: Tuple[float, ...] = Field(..., description="Flattened P x P x 3 image crop, values in [0, 1]")

    @field_validator("tokens")
    @classmethod
    def _check_tokens(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(token < 0 for token in value):
            raise ValueError("token ids must be non-negative")
        return value

    @field_validator("patch")
    @classmethod
    def _check_patch(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        side = math.isqrt(len(value) // 3)
        if side < 1 or side * side * 3 != len(value):
            raise ValueError(f"patch of {len(value)} values is not P x P x 3")
        if not all(0.0 <= v <= 1.0 for v in value):
            raise ValueError("patch values must lie in [0, 1]")
        return value

    @property
    def patch_size(self) -> int:
        return math.isqrt(len(self.patch) // 3)

    def patch_array(self) -> np.ndarray:
        side = self.patch_size
        return np.asarray(self.patch, dtype=np.float64).reshape(side, side, 3)

    @property
    def text(self) -> str:
        return " ".join(f"{TOKEN_PREFIX}{token}" for token in self.tokens)


class GroundTruth(BaseModel):
    """Relation labels; each kind of document carries the fields it needs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    row_groups: Optional[Tuple[Tuple[int, ...], ...]] = None
    col_groups: Optional[Tuple[Tuple[int, ...], ...]] = None
    kv_links: Optional[Tuple[Tuple[int, int], ...]] = None
    reading_order: Optional[Tuple[int, ...]] = None


def _check_partition(groups: Tuple[Tuple[int, ...], ...], n: int, name: str) -> None:
    seen: Dict[int, int] = {}
    for index, group in enumerate(groups):
        if not group:
            raise ValueError(f"{name}: group {index} is empty")
        for entity_id in group:
            if not 0 <= entity_id < n:
                raise EntityInvariantError(entity_id, f"{name} references an unknown entity")
            if entity_id in seen:
                raise EntityInvariantError(entity_id, f"{name} places the entity in two groups")
            seen[entity_id] = index
    missing = sorted(set(range(n)) - set(seen))
    if missing:
        raise EntityInvariantError(missing[0], f"{name} leaves the entity ungrouped")


class Document(BaseModel):
    """A visually-rich document with known entity fields."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    doc_id: str = ""
    kind: DocumentKind
    entities: Tuple[Entity, ...]
    labels: GroundTruth = GroundTruth()

    @model_validator(mode="after")
    def _check_document(self) -> "Document":
        n = len(self.entities)
        if n < 2:
            raise ValueError(f"a document needs at least 2 entities, got {n}")
        ids = [entity.id for entity in self.entities]
        if sorted(ids) != list(range(n)):
            bad = next(i for i in ids if not 0 <= i < n or ids.count(i) > 1)
            raise EntityInvariantError(bad, f"entity ids must be 0..{n - 1} without repeats")
        sizes = {entity.patch_size for entity in self.entities}
        if len(sizes) > 1:
            raise ValueError(f"entities mix patch sizes {sorted(sizes)}")
        for i, a in enumerate(self.entities):
            for b in self.entities[i + 1 :]:
                if a.bbox.overlaps(b.bbox):
                    raise EntityInvariantError(b.id, f"bbox overlaps entity {a.id}")
        self._check_labels(n)
        return self

    def _check_labels(self, n: int) -> None:
        labels = self.labels
        if labels.row_groups is not None:
            _check_partition(labels.row_groups, n, "row_groups")
        if labels.col_groups is not None:
            _check_partition(labels.col_groups, n, "col_groups")
        if labels.kv_links is not None:
            keys, values = set(), set()
            for key, value in labels.kv_links:
                for entity_id in (key, value):
                    if not 0 <= entity_id < n:
                        raise EntityInvariantError(entity_id, "kv link references an unknown entity")
                if key == value:
                    raise EntityInvariantError(key, "kv link from an entity to itself")
                if key in keys:
                    raise EntityInvariantError(key, "key has more than one value")
                if value in values:
                    raise EntityInvariantError(value, "value has more than one key")
                keys.add(key)
                values.add(value)
        if labels.reading_order is not None and sorted(labels.reading_order) != list(range(n)):
            raise ValueError(f"reading_order is not a permutation of 0..{n - 1}")

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def by_id(self) -> Tuple[Entity, ...]:
        """Entities ordered by id, the row order of every per-entity matrix."""
        return tuple(sorted(self.entities, key=lambda entity: entity.id))

    def is_sorted(self) -> bool:
        keys = [(e.bbox.y0, e.bbox.x0) for e in self.entities]
        return keys == sorted(keys) and [e.id for e in self.entities] == list(range(len(self.entities)))
