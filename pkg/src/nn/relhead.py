"""Per-kind pair classifiers that instantiate relation matrices."""

from typing import Optional, Union

import numpy as np

from src.core import autodiff as ad
from src.core.autodiff import Node
from src.models.relation import RelationKind
from src.nn import layers
from src.nn.parameters import Bound, ParameterBuilder, ParameterSet
from src.nn.rcm import LRCM_AGGREGATOR, init_aggregator, local_relation_repr


def head_prefix(kind: Union[RelationKind, str]) -> str:
    return f"relhead.{RelationKind.parse(kind).value}"


def init_relation_head(
    builder: ParameterBuilder,
    kind: Union[RelationKind, str],
    hidden: int,
    d_local: int,
    pretrained: Optional[ParameterSet] = None,
) -> None:
    """Aggregator plus classifier d_L -> d_L -> 1.

    With ``pretrained`` holding an LRCM aggregator of matching shape, the
    aggregator starts from those weights; otherwise it is drawn fresh.
    """
    prefix = head_prefix(kind)
    init_aggregator(builder, f"{prefix}.aggregator", hidden, d_local)
    if pretrained is not None:
        source = pretrained.subset([LRCM_AGGREGATOR + "."]).rename(LRCM_AGGREGATOR, f"{prefix}.aggregator")
        if source.shapes() and source.shapes() == builder.params.subset([f"{prefix}.aggregator."]).shapes():
            for name, value in source.items():
                builder.params[name] = value
    builder.mlp(f"{prefix}.classifier", d_local, d_local, 1)


def relation_logits(m: Node, p: Bound, kind: Union[RelationKind, str]) -> Node:
    """N x N logits; ``sigmoid`` of entry (i, j) scores the relation i -> j."""
    prefix = head_prefix(kind)
    n = m.shape[0]
    pairs = local_relation_repr(m, p, f"{prefix}.aggregator")
    logits = layers.mlp(p, f"{prefix}.classifier", pairs)
    return ad.reshape(logits, (n, n))


def relation_scores(m: Node, p: Bound, kind: Union[RelationKind, str]) -> np.ndarray:
    return ad.sigmoid(relation_logits(m, p, kind)).value
