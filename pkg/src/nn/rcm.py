"""Relational consistency losses.

Features arrive padded as B x N x d with a B x N validity mask. Local
relations are f(m_i (+) m_j) for every ordered pair including i = j; global
relations are the temperature softmax of m m^T over valid entities, zero
padded to ``n_cap`` columns so fixed-width heads can consume them.

Online predictions are compared with stop-gradient target projections by a
masked mean squared error averaged per document, so a padded batch gives
exactly the mean of the single-document losses.
"""

from typing import Optional

import numpy as np

from src.core import autodiff as ad
from src.core.autodiff import Node
from src.core.exceptions import CapacityError, DegenerateInputError, ParameterError
from src.nn import layers
from src.nn.parameters import Bound, ParameterBuilder

LRCM_AGGREGATOR = "lrcm.aggregator"
LRCM_PROJECTOR = "lrcm.projector"
LRCM_PREDICTOR = "lrcm.predictor"
GRCM_PROJECTOR = "grcm.projector"
GRCM_PREDICTOR = "grcm.predictor"
BYOL_PROJECTOR = "byol.projector"
BYOL_PREDICTOR = "byol.predictor"
MVLM_HEAD = "mvlm.head"

ONLINE_ONLY = (LRCM_PREDICTOR, GRCM_PREDICTOR, BYOL_PREDICTOR, MVLM_HEAD)


def init_aggregator(builder: ParameterBuilder, prefix: str, hidden: int, d_local: int) -> None:
    """f: 2d -> d_L -> d_L."""
    builder.mlp(prefix, 2 * hidden, d_local, d_local)


def init_heads(builder: ParameterBuilder, tasks, hidden: int, d_local: int, d_global: int, n_cap: int, vocab_size: int):
    if "lrcm" in tasks:
        init_aggregator(builder, LRCM_AGGREGATOR, hidden, d_local)
        builder.mlp(LRCM_PROJECTOR, d_local, d_local, d_local)
        builder.mlp(LRCM_PREDICTOR, d_local, d_local, d_local, zero_output=True)
    if "grcm" in tasks:
        builder.mlp(GRCM_PROJECTOR, n_cap, d_global, d_global)
        builder.mlp(GRCM_PREDICTOR, d_global, d_global, d_global, zero_output=True)
    if "byol" in tasks:
        builder.mlp(BYOL_PROJECTOR, hidden, d_local, d_local)
        builder.mlp(BYOL_PREDICTOR, d_local, d_local, d_local, zero_output=True)
    if "mvlm" in tasks:
        builder.normal(f"{MVLM_HEAD}.weight", (hidden, vocab_size))
        builder.zeros(f"{MVLM_HEAD}.bias", (vocab_size,))


def local_relation_repr(m: Node, p: Bound, prefix: str = LRCM_AGGREGATOR) -> Node:
    """R^L with row ``i * N + j`` holding f(m[i] (+) m[j]); works on N x d or B x N x d."""
    *lead, n, d = m.shape
    w1 = p[f"{prefix}.fc1.weight"]
    left = ad.matmul(m, w1[:d])
    right = ad.matmul(m, w1[d:])
    width = left.shape[-1]
    pairs = ad.reshape(left, (*lead, n, 1, width)) + ad.reshape(right, (*lead, 1, n, width))
    hidden = ad.gelu(pairs + p[f"{prefix}.fc1.bias"])
    out = layers.linear(p, f"{prefix}.fc2", hidden)
    return ad.reshape(out, (*lead, n * n, out.shape[-1]))


def pair_mask(mask: np.ndarray) -> np.ndarray:
    """B x N entity mask -> B x N^2 pair mask (both ends valid)."""
    mask = np.asarray(mask, dtype=bool)
    b, n = mask.shape
    return (mask[:, :, None] & mask[:, None, :]).reshape(b, n * n)


def global_relation_distribution(m: Node, tau_g: float, mask: Optional[np.ndarray] = None) -> Node:
    """R^G: row-wise softmax of m m^T / tau_g over valid entities; padded rows are zero."""
    if not tau_g > 0:
        raise ParameterError(f"tau_g must be positive, got {tau_g}")
    axes = tuple(range(m.ndim - 2)) + (m.ndim - 1, m.ndim - 2)
    similarity = ad.matmul(m, ad.transpose(m, axes))
    if mask is None:
        return ad.softmax_rows(similarity, temperature=tau_g)
    mask = np.asarray(mask, dtype=bool)
    columns = mask[..., None, :]
    rows = mask[..., :, None].astype(np.float64)
    return ad.softmax_rows(similarity, temperature=tau_g, mask=columns) * rows


def pad_to_cap(r: Node, n_cap: int) -> Node:
    n = r.shape[-1]
    if n > n_cap:
        raise CapacityError(f"{n} entities exceed the global relation cap of {n_cap}")
    return ad.pad(r, [(0, 0)] * (r.ndim - 1) + [(0, n_cap - n)])


def batch_masked_mse(pred: Node, target: Node, mask: np.ndarray) -> Node:
    """Mean over documents of each document's MSE over its valid rows.

    ``pred``/``target`` are B x K x w, ``mask`` is B x K.
    """
    mask = np.asarray(mask, dtype=np.float64)
    batch, _, width = pred.shape
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateInputError("a document in the batch has no valid rows")
    weights = mask[:, :, None] / (batch * counts[:, None, None] * width)
    return ad.weighted_sse(pred, target, weights)


def _consistency(online_repr: Node, target_repr: Node, online: Bound, target: Bound, projector: str,
                 predictor: str, mask: np.ndarray) -> Node:
    prediction = layers.residual_mlp(online, predictor, layers.mlp(online, projector, online_repr))
    projection = ad.stop_gradient(layers.mlp(target, projector, target_repr))
    return batch_masked_mse(prediction, projection, mask)


def lrcm_loss(m_online: Node, m_target: Node, online: Bound, target: Bound, mask: np.ndarray) -> Node:
    """One direction of the local loss: online view features against target view features."""
    r_online = local_relation_repr(m_online, online)
    r_target = local_relation_repr(m_target, target)
    return _consistency(r_online, r_target, online, target, LRCM_PROJECTOR, LRCM_PREDICTOR, pair_mask(mask))


def grcm_loss(m_online: Node, m_target: Node, online: Bound, target: Bound, mask: np.ndarray, tau_g: float,
              n_cap: int) -> Node:
    """One direction of the global loss over the valid entity rows."""
    r_online = pad_to_cap(global_relation_distribution(m_online, tau_g, mask), n_cap)
    r_target = pad_to_cap(global_relation_distribution(m_target, tau_g, mask), n_cap)
    return _consistency(r_online, r_target, online, target, GRCM_PROJECTOR, GRCM_PREDICTOR, mask)


def byol_loss(m_online: Node, m_target: Node, online: Bound, target: Bound, mask: np.ndarray) -> Node:
    """Consistency of the entity features themselves."""
    return _consistency(m_online, m_target, online, target, BYOL_PROJECTOR, BYOL_PREDICTOR, mask)


def rcm_loss(l_lrcm: Optional[Node], l_grcm: Optional[Node]) -> Node:
    """L_RCM = L_LRCM + L_GRCM; an absent term counts as 0."""
    total = ad.constant(0.0)
    for term in (l_lrcm, l_grcm):
        if term is not None:
            total = total + term
    return total


def sample_token_mask(n_tokens: int, mask_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(mask_rate) per token; resamples once if nothing is picked."""
    if not 0.0 < mask_rate < 1.0:
        raise ParameterError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    for _ in range(2):
        picked = rng.random(n_tokens) < mask_rate
        if picked.any():
            return picked
    raise DegenerateInputError(f"no token of {n_tokens} was masked at rate {mask_rate}")


def mvlm_loss(fused: Node, positions: np.ndarray, targets: np.ndarray, p: Bound) -> Node:
    """Cross-entropy of the vocabulary head at the masked positions only."""
    logits = layers.linear(p, MVLM_HEAD, ad.getitem(fused, np.asarray(positions, dtype=np.int64)))
    return ad.cross_entropy(logits, targets)
