"""Multi-modal entity encoder.

A document becomes one token sequence: for every entity (in id order) an
[ENT] token followed by its text tokens, then one visual token per entity.
Each token's input vector is the sum of five embeddings: token (or patch
projection for visual tokens), 1-D position, projected 2-D layout, segment
(entity index) and modality. A pre-norm transformer fuses the sequence and
the entity features are read off at the [ENT] positions.
"""

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.core import autodiff as ad
from src.core.autodiff import Node
from src.core.config import ModelSettings
from src.core.exceptions import CapacityError, ParameterError
from src.models.document import Document
from src.nn import layers
from src.nn.parameters import Bound, ParameterBuilder

TEXT, VISUAL = 0, 1
LAYOUT_FEATURES = 6


@dataclass(frozen=True)
class TokenSequence:
    """Token ids and per-token channel indices of one document."""

    doc_id: str
    token_ids: np.ndarray
    positions: np.ndarray
    layout: np.ndarray
    segments: np.ndarray
    modality: np.ndarray
    attention_mask: np.ndarray
    patches: np.ndarray
    ent_positions: np.ndarray
    text_spans: Tuple[Tuple[int, int], ...]
    n_text: int

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def n_entities(self) -> int:
        return int(self.ent_positions.shape[0])

    def text_token_positions(self) -> np.ndarray:
        """Positions of ordinary text tokens (not [ENT], not visual, not padding)."""
        return np.concatenate([np.arange(start, end) for start, end in self.text_spans]).astype(np.int64)

    def with_tokens(self, positions: np.ndarray, token_id: int) -> "TokenSequence":
        ids = self.token_ids.copy()
        ids[np.asarray(positions, dtype=np.int64)] = token_id
        return replace(self, token_ids=ids)

    def pad_to(self, length: int, pad_id: int) -> "TokenSequence":
        """Append invisible padding tokens up to ``length``."""
        extra = length - self.length
        if extra < 0:
            raise ParameterError(f"cannot pad a sequence of {self.length} tokens to {length}")

        def grow(array: np.ndarray, fill) -> np.ndarray:
            tail = np.full((extra,) + array.shape[1:], fill, dtype=array.dtype)
            return np.concatenate([array, tail])

        return replace(
            self,
            token_ids=grow(self.token_ids, pad_id),
            positions=grow(self.positions, 0),
            layout=grow(self.layout, 0.0),
            segments=grow(self.segments, 0),
            modality=grow(self.modality, TEXT),
            attention_mask=grow(self.attention_mask, False),
        )


@dataclass(frozen=True)
class EntityFeatures:
    """Per-entity features ``m`` (N x d) of one document."""

    doc_id: str
    m: Node
    n_valid: int


class DocumentEncoder:
    """Embeds, fuses and pools documents with parameters under ``encoder.``."""

    prefix = "encoder"

    def __init__(self, model: ModelSettings, vocab_size: int, patch_size: int):
        self.model = model
        self.vocab_size = vocab_size
        self.patch_size = patch_size
        self.ent_id = vocab_size
        self.mask_id = vocab_size + 1
        self.pad_id = vocab_size + 2

    @property
    def hidden(self) -> int:
        return self.model.hidden

    @property
    def table_size(self) -> int:
        return self.vocab_size + 3

    def init_parameters(self, builder: ParameterBuilder) -> None:
        d = self.hidden
        p = self.prefix
        builder.normal(f"{p}.token", (self.table_size, d))
        builder.normal(f"{p}.position", (self.model.max_seq_len, d))
        builder.normal(f"{p}.segment", (self.model.n_cap, d))
        builder.normal(f"{p}.modality", (2, d))
        builder.normal(f"{p}.layout.weight", (LAYOUT_FEATURES, d))
        builder.zeros(f"{p}.layout.bias", (d,))
        builder.normal(f"{p}.patch.weight", (self.patch_size * self.patch_size * 3, d))
        builder.zeros(f"{p}.patch.bias", (d,))
        for index in range(self.model.layers):
            layer = f"{p}.layers.{index}"
            builder.layer_norm(f"{layer}.ln1", d)
            for name in ("query", "key", "value", "output"):
                builder.linear(f"{layer}.attn.{name}", d, d)
            builder.layer_norm(f"{layer}.ln2", d)
            builder.mlp(f"{layer}.ffn", d, self.model.ff_hidden, d)

    def tokenize(self, doc: Document) -> TokenSequence:
        """Lay out the token sequence; raises ``CapacityError`` when it does not fit."""
        entities = doc.by_id()
        n = len(entities)
        name = doc.doc_id or "<unnamed>"
        if n > self.model.n_cap:
            raise CapacityError(f"document {name}: {n} entities exceed the cap of {self.model.n_cap}")
        length = sum(1 + len(e.tokens) for e in entities) + n
        if length > self.model.max_seq_len:
            raise CapacityError(f"document {name}: {length} tokens exceed max_seq_len {self.model.max_seq_len}")
        for entity in entities:
            if max(entity.tokens) >= self.vocab_size:
                raise CapacityError(f"document {name}: entity {entity.id} uses a token outside the vocabulary")

        ids: List[int] = []
        segments: List[int] = []
        layout_rows: List[np.ndarray] = []
        ent_positions: List[int] = []
        spans: List[Tuple[int, int]] = []
        for index, entity in enumerate(entities):
            box = entity.bbox.layout_features()
            ent_positions.append(len(ids))
            ids.append(self.ent_id)
            ids.extend(entity.tokens)
            spans.append((ent_positions[-1] + 1, len(ids)))
            segments.extend([index] * (1 + len(entity.tokens)))
            layout_rows.extend([box] * (1 + len(entity.tokens)))
        n_text = len(ids)
        for index, entity in enumerate(entities):
            ids.append(self.pad_id)
            segments.append(index)
            layout_rows.append(entity.bbox.layout_features())

        return TokenSequence(
            doc_id=doc.doc_id,
            token_ids=np.array(ids, dtype=np.int64),
            positions=np.arange(length, dtype=np.int64),
            layout=np.stack(layout_rows),
            segments=np.array(segments, dtype=np.int64),
            modality=np.array([TEXT] * n_text + [VISUAL] * n, dtype=np.int64),
            attention_mask=np.ones(length, dtype=bool),
            patches=np.stack([e.patch_array().reshape(-1) for e in entities]),
            ent_positions=np.array(ent_positions, dtype=np.int64),
            text_spans=tuple(spans),
            n_text=n_text,
        )

    def patch_embedding(self, p: Bound, patches: np.ndarray) -> Node:
        return layers.linear(p, f"{self.prefix}.patch", ad.constant(patches))

    def embed(self, seq: TokenSequence, p: Bound) -> Node:
        """Summed input embeddings, one row per token."""
        pre = self.prefix
        n = seq.n_entities
        text = ad.getitem(p[f"{pre}.token"], seq.token_ids[: seq.n_text])
        visual = self.patch_embedding(p, seq.patches)
        parts = [text, visual]
        if seq.length > seq.n_text + n:
            parts.append(ad.getitem(p[f"{pre}.token"], seq.token_ids[seq.n_text + n :]))
        base = ad.concat(parts, axis=0)
        return (
            base
            + ad.getitem(p[f"{pre}.position"], seq.positions)
            + layers.linear(p, f"{pre}.layout", ad.constant(seq.layout))
            + ad.getitem(p[f"{pre}.segment"], seq.segments)
            + ad.getitem(p[f"{pre}.modality"], seq.modality)
        )

    def encode(self, x: Node, seq: TokenSequence, p: Bound) -> Node:
        """Run the transformer stack; padded positions are invisible as keys."""
        for index in range(self.model.layers):
            x = layers.transformer_layer(p, f"{self.prefix}.layers.{index}", x, self.model.heads, seq.attention_mask)
        return x

    def extract_entity_features(self, fused: Node, seq: TokenSequence, pooling: Optional[str] = None) -> EntityFeatures:
        pooling = pooling or self.model.entity_pooling
        if pooling == "ent":
            m = ad.getitem(fused, seq.ent_positions)
        else:
            weights = np.zeros((seq.n_entities, seq.length))
            for row, (start, end) in enumerate(seq.text_spans):
                weights[row, start:end] = 1.0 / (end - start)
            m = ad.matmul(ad.constant(weights), fused)
        return EntityFeatures(doc_id=seq.doc_id, m=m, n_valid=seq.n_entities)

    def features(self, seq: TokenSequence, p: Bound) -> Tuple[EntityFeatures, Node]:
        """Entity features plus the fused sequence they were pooled from."""
        fused = self.encode(self.embed(seq, p), seq, p)
        return self.extract_entity_features(fused, seq), fused


def pad_batch(features: Sequence[EntityFeatures]) -> Tuple[Node, np.ndarray]:
    """Stack per-document features into B x N_max x d with a B x N_max validity mask."""
    if not features:
        raise ParameterError("pad_batch needs at least one document")
    n_max = max(f.n_valid for f in features)
    rows = [ad.pad(f.m, [(0, n_max - f.n_valid), (0, 0)]) for f in features]
    mask = np.zeros((len(features), n_max), dtype=bool)
    for index, f in enumerate(features):
        mask[index, : f.n_valid] = True
    return ad.stack(rows, axis=0), mask
