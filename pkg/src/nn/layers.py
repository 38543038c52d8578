"""Building blocks over bound parameters.

Each function reads its weights from a ``Bound`` mapping under a dotted
prefix, the same prefix ``ParameterBuilder`` used to create them.
"""

from typing import Optional

import numpy as np

from src.core import autodiff as ad
from src.core.autodiff import Node
from src.nn.parameters import Bound


def linear(p: Bound, prefix: str, x: Node) -> Node:
    return ad.matmul(x, p[f"{prefix}.weight"]) + p[f"{prefix}.bias"]


def mlp(p: Bound, prefix: str, x: Node) -> Node:
    """fc1 -> GELU -> fc2."""
    return linear(p, f"{prefix}.fc2", ad.gelu(linear(p, f"{prefix}.fc1", x)))


def residual_mlp(p: Bound, prefix: str, x: Node) -> Node:
    """x + mlp(x); with a zero-initialised fc2 this starts as the identity."""
    return x + mlp(p, prefix, x)


def layer_norm(p: Bound, prefix: str, x: Node) -> Node:
    return ad.layer_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])


def self_attention(p: Bound, prefix: str, x: Node, heads: int, key_mask: Optional[np.ndarray] = None) -> Node:
    """Multi-head scaled dot-product self-attention over an L x d sequence.

    Keys where ``key_mask`` is False receive zero attention weight.
    """
    length, width = x.shape
    head_dim = width // heads

    def split(t: Node) -> Node:
        return ad.transpose(ad.reshape(t, (length, heads, head_dim)), (1, 0, 2))

    q = split(linear(p, f"{prefix}.query", x))
    k = split(linear(p, f"{prefix}.key", x))
    v = split(linear(p, f"{prefix}.value", x))
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) / float(np.sqrt(head_dim))
    weights = ad.softmax_rows(scores, mask=None if key_mask is None else np.asarray(key_mask, dtype=bool))
    context = ad.reshape(ad.transpose(ad.matmul(weights, v), (1, 0, 2)), (length, width))
    return linear(p, f"{prefix}.output", context)


def transformer_layer(p: Bound, prefix: str, x: Node, heads: int, key_mask: Optional[np.ndarray] = None) -> Node:
    """Pre-norm block: x + attn(ln1(x)), then h + ffn(ln2(h))."""
    h = x + self_attention(p, f"{prefix}.attn", layer_norm(p, f"{prefix}.ln1", x), heads, key_mask)
    return h + mlp(p, f"{prefix}.ffn", layer_norm(p, f"{prefix}.ln2", h))
