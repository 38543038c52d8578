"""Augmentation records."""

from enum import Enum
from typing import Literal, Tuple

from pydantic import BaseModel, ConfigDict, Field

MIN_RATIO = 0.85
MAX_RATIO = 1.15


class AugmentOp(str, Enum):
    VISUAL = "visual"
    VISUAL_LAYOUT = "visual_layout"


class VisualParams(BaseModel):
    """Colour distortion and blur applied to every patch of a view."""

    model_config = ConfigDict(frozen=True)

    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = Field(default=0.0, description="Rotation about the grey axis, radians")
    blur_sigma: float = Field(default=0.0, ge=0.0)


class EntityResize(BaseModel):
    model_config = ConfigDict(frozen=True)

    entity_id: int
    edge: Literal["width", "height"]
    ratio: float = Field(..., ge=MIN_RATIO, le=MAX_RATIO)


class AugmentRecord(BaseModel):
    """What a positive view did to its source document."""

    model_config = ConfigDict(frozen=True)

    op: AugmentOp
    visual: VisualParams = VisualParams()
    layout: Tuple[EntityResize, ...] = ()
    attempts: int = Field(default=0, ge=0, description="Layout draws tried, 0 for visual-only views")
    fallback: bool = Field(default=False, description="Layout draws all rejected, visual view used instead")
