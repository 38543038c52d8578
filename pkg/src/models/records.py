"""Training and evaluation records."""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class StepRecord(BaseModel):
    """One pre-training step."""

    step: int
    seed: int
    l_lrcm: Optional[float] = None
    l_grcm: Optional[float] = None
    l_mvlm: Optional[float] = None
    l_byol: Optional[float] = None
    total: float
    grad_norm: float
    lr: float
    tau_ema: float


class FinetuneRecord(BaseModel):
    """One fine-tuning step."""

    kind: str
    epoch: int
    step: int
    loss: float
    grad_norm: float
    lr: float


class DocumentScore(BaseModel):
    doc_id: str
    score: float
    extra: Dict[str, float] = Field(default_factory=dict)


class EvaluationReport(BaseModel):
    """Scores of one downstream task on one split."""

    task: str = Field(..., description="table, form or paragraphs")
    metric: str = Field(..., description="table_f1, pairwise_f1 or bleu")
    threshold: float
    documents: List[DocumentScore] = Field(default_factory=list)
    aggregate: Dict[str, float] = Field(default_factory=dict)
    config_hash: str
    checkpoint_hash: Dict[str, str] = Field(default_factory=dict)


class AblationRecord(BaseModel):
    tasks: str
    seed: int
    scores: Dict[str, float]
