"""Synthetic document generation.

Every layout decision is an integer drawn from a SplitMix64 stream, so a
(parameters, seed) pair reproduces the same document everywhere. Entity
sides stay at or below ``MAX_SIDE`` and neighbouring entities are at least
``MIN_GAP`` apart, which leaves room for the layout augmentation to resize
any box without creating an overlap or changing a relation.
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from src.core.config import Settings
from src.core.exceptions import CapacityError, ParameterError
from src.core.rng import SplitMix64, derive_seed
from src.models.document import BBox, Document, DocumentKind, Entity, GroundTruth
from src.services.corpus_service import save_corpus, sort_entities
from src.utils.logging import get_logger

logger = get_logger(__name__)

MARGIN = 20
MAX_SIDE = 130
MIN_GAP = 24
FORM_SLOT_COLUMNS = 3
FORM_SLOT_ROWS = 4
FORM_SLOT_WIDTH = 320
FORM_SLOT_HEIGHT = 240


class Role(str, Enum):
    CELL = "cell"
    KEY = "key"
    VALUE = "value"
    SENTENCE = "sentence"


# base RGB tint per role; the visual channel carries the role
ROLE_TINTS = {
    Role.CELL: (0.55, 0.60, 0.75),
    Role.KEY: (0.80, 0.35, 0.30),
    Role.VALUE: (0.30, 0.70, 0.40),
    Role.SENTENCE: (0.50, 0.50, 0.50),
}


class Vocabulary:
    """Splits the token ids into four disjoint ranges, one per role."""

    def __init__(self, size: int):
        if size < 8:
            raise ParameterError(f"vocabulary of {size} ids is too small to split into roles")
        self.size = size
        quarter = size // 4
        self.ranges = {
            Role.CELL: (0, quarter),
            Role.KEY: (quarter, 2 * quarter),
            Role.VALUE: (2 * quarter, 3 * quarter),
            Role.SENTENCE: (3 * quarter, size),
        }

    def role_of(self, token: int) -> Role:
        for role, (low, high) in self.ranges.items():
            if low <= token < high:
                return role
        raise ParameterError(f"token {token} is outside the vocabulary of {self.size}")

    def draw(self, role: Role, rng: SplitMix64, count: int) -> Tuple[int, ...]:
        low, high = self.ranges[role]
        return tuple(rng.randint(low, high - 1) for _ in range(count))


@dataclass(frozen=True)
class _Draft:
    bbox: BBox
    role: Role


class DocumentGenerator:
    """Builds tables, forms and multi-column paragraph pages."""

    def __init__(
        self,
        vocab_size: int = 200,
        max_tokens_per_entity: int = 4,
        patch_size: int = 8,
        n_cap: int = 32,
        max_seq_len: int = 512,
    ):
        self.vocab = Vocabulary(vocab_size)
        self.max_tokens = max_tokens_per_entity
        self.patch_size = patch_size
        self.n_cap = n_cap
        self.max_seq_len = max_seq_len

    @classmethod
    def from_settings(cls, config: Settings) -> "DocumentGenerator":
        return cls(
            vocab_size=config.corpus.vocab_size,
            max_tokens_per_entity=config.corpus.max_tokens_per_entity,
            patch_size=config.corpus.patch_size,
            n_cap=config.model.n_cap,
            max_seq_len=config.model.max_seq_len,
        )

    def _check_capacity(self, n_entities: int, what: str) -> None:
        if n_entities > self.n_cap:
            raise CapacityError(f"{what}: {n_entities} entities exceed the cap of {self.n_cap}")
        budget = n_entities * (self.max_tokens + 2)
        if budget > self.max_seq_len:
            raise CapacityError(f"{what}: up to {budget} tokens exceed max_seq_len {self.max_seq_len}")

    def _patch(self, role: Role, rng: SplitMix64) -> Tuple[float, ...]:
        size = self.patch_size * self.patch_size
        tint = np.array(ROLE_TINTS[role])
        shade = rng.uniform(1, -0.08, 0.08)[0]
        noise = rng.uniform(size * 3, -0.1, 0.1).reshape(size, 3)
        patch = np.clip(tint + shade + noise, 0.0, 1.0)
        return tuple(float(v) for v in patch.reshape(-1))

    def _assemble(self, kind: DocumentKind, drafts: List[_Draft], labels: GroundTruth, rng: SplitMix64,
                  doc_id: str) -> Document:
        entities = []
        for index, draft in enumerate(drafts):
            count = rng.randint(1, self.max_tokens)
            entities.append(
                Entity(
                    id=index,
                    tokens=self.vocab.draw(draft.role, rng, count),
                    bbox=draft.bbox,
                    patch=self._patch(draft.role, rng),
                )
            )
        return sort_entities(Document(doc_id=doc_id, kind=kind, entities=tuple(entities), labels=labels))

    @staticmethod
    def _bands(rng: SplitMix64, count: int, low_side: int, high_side: int) -> List[Tuple[int, int]]:
        """``count`` disjoint [start, end) bands across the page, >= MIN_GAP apart."""
        pitch = (1000 - 2 * MARGIN) // count
        room = pitch - MIN_GAP
        bands = []
        for index in range(count):
            side = rng.randint(min(low_side, room), min(high_side, room))
            start = MARGIN + index * pitch + rng.randint(0, room - side)
            bands.append((start, start + side))
        return bands

    def gen_table(self, rows: int, cols: int, seed: int, doc_id: str = "") -> Document:
        """A rows x cols grid of cells on jittered row and column bands."""
        if not (2 <= rows <= 10 and 2 <= cols <= 10):
            raise ParameterError(f"table shape {rows}x{cols} outside 2..10 x 2..10")
        self._check_capacity(rows * cols, doc_id or f"table {rows}x{cols}")
        rng = SplitMix64(seed)
        col_bands = self._bands(rng, cols, 40, MAX_SIDE)
        row_bands = self._bands(rng, rows, 30, 80)
        drafts = []
        for r, (top, bottom) in enumerate(row_bands):
            for c, (left, right) in enumerate(col_bands):
                jx = min(6, (right - left) // 10)
                jy = min(6, (bottom - top) // 10)
                bbox = BBox(
                    x0=left + rng.randint(0, jx),
                    y0=top + rng.randint(0, jy),
                    x1=right - rng.randint(0, jx),
                    y1=bottom - rng.randint(0, jy),
                )
                drafts.append(_Draft(bbox, Role.CELL))
        labels = GroundTruth(
            row_groups=tuple(tuple(r * cols + c for c in range(cols)) for r in range(rows)),
            col_groups=tuple(tuple(r * cols + c for r in range(rows)) for c in range(cols)),
        )
        return self._assemble(DocumentKind.TABLE, drafts, labels, rng, doc_id)

    def gen_form(self, n_pairs: int, seed: int, doc_id: str = "") -> Document:
        """Key/value pairs, one per slot of a 3 x 4 grid; each value sits right of or below its key."""
        slots = FORM_SLOT_COLUMNS * FORM_SLOT_ROWS
        if not 1 <= n_pairs <= slots:
            raise ParameterError(f"form with {n_pairs} pairs outside 1..{slots}")
        self._check_capacity(2 * n_pairs, doc_id or f"form with {n_pairs} pairs")
        rng = SplitMix64(seed)
        order = list(range(slots))
        for i in range(slots - 1, 0, -1):
            j = rng.randint(0, i)
            order[i], order[j] = order[j], order[i]

        drafts = []
        links = []
        for slot in sorted(order[:n_pairs]):
            sx = MARGIN + (slot % FORM_SLOT_COLUMNS) * FORM_SLOT_WIDTH
            sy = MARGIN + (slot // FORM_SLOT_COLUMNS) * FORM_SLOT_HEIGHT
            kx0 = sx + rng.randint(0, 10)
            ky0 = sy + rng.randint(0, 20)
            key = BBox(x0=kx0, y0=ky0, x1=kx0 + rng.randint(50, 110), y1=ky0 + rng.randint(24, 40))
            gap = rng.randint(MIN_GAP, 36)
            width, height = rng.randint(50, 110), rng.randint(24, 40)
            if rng.coin():
                vx0 = key.x1 + gap
                vy0 = max(sy, key.y0 + rng.randint(-4, 4))
            else:
                vx0 = max(sx, key.x0 + rng.randint(-4, 4))
                vy0 = key.y1 + gap
            value = BBox(x0=vx0, y0=vy0, x1=vx0 + width, y1=vy0 + height)
            links.append((len(drafts), len(drafts) + 1))
            drafts.extend([_Draft(key, Role.KEY), _Draft(value, Role.VALUE)])
        labels = GroundTruth(kv_links=tuple(links))
        return self._assemble(DocumentKind.FORM, drafts, labels, rng, doc_id)

    def gen_paragraphs(self, n_sentences: int, seed: int, doc_id: str = "") -> Document:
        """Sentences in one or two columns, read column by column, top to bottom."""
        if not 2 <= n_sentences <= 20:
            raise ParameterError(f"{n_sentences} sentences outside 2..20")
        self._check_capacity(n_sentences, doc_id or f"page of {n_sentences} sentences")
        rng = SplitMix64(seed)
        two_columns = n_sentences > 12 or (n_sentences >= 3 and rng.coin())
        if two_columns:
            left = (n_sentences + 1) // 2
            columns = [(MARGIN + 20, left), (520, n_sentences - left)]
        else:
            columns = [(MARGIN + 20, n_sentences)]

        drafts = []
        for column_x, count in columns:
            y = MARGIN + rng.randint(0, 20)
            for _ in range(count):
                x0 = column_x + rng.randint(0, 8)
                height = rng.randint(16, 24)
                bbox = BBox(x0=x0, y0=y, x1=x0 + rng.randint(90, MAX_SIDE), y1=y + height)
                drafts.append(_Draft(bbox, Role.SENTENCE))
                y = bbox.y1 + rng.randint(MIN_GAP, 28)
        labels = GroundTruth(reading_order=tuple(range(n_sentences)))
        return self._assemble(DocumentKind.PARAGRAPHS, drafts, labels, rng, doc_id)

    def gen_document(self, kind: DocumentKind, index: int, seed: int, config: Settings) -> Document:
        """The ``index``-th document of a kind, sized from the corpus ranges."""
        doc_seed = derive_seed(seed, "corpus", kind.value, index)
        sizes = SplitMix64(derive_seed(doc_seed, "size"))
        doc_id = f"{kind.value}-{index}"
        corpus = config.corpus
        if kind == DocumentKind.TABLE:
            rows = sizes.randint(*corpus.table_rows)
            cols = sizes.randint(*corpus.table_cols)
            return self.gen_table(rows, cols, doc_seed, doc_id)
        if kind == DocumentKind.FORM:
            return self.gen_form(sizes.randint(*corpus.form_pairs), doc_seed, doc_id)
        return self.gen_paragraphs(sizes.randint(*corpus.paragraph_sentences), doc_seed, doc_id)

    def gen_corpus(
        self,
        mix: Mapping[Union[DocumentKind, str], int],
        seed: int,
        config: Settings,
        path: Optional[Union[str, Path]] = None,
    ) -> List[Document]:
        """Documents of every kind in ``mix``, kind by kind; written to ``path`` when given."""
        counts: Dict[DocumentKind, int] = {DocumentKind(k): int(v) for k, v in mix.items()}
        documents = []
        for kind in DocumentKind:
            for index in range(counts.get(kind, 0)):
                documents.append(self.gen_document(kind, index, seed, config))
        logger.info(f"Generated {len(documents)} documents", counts={k.value: v for k, v in counts.items()})
        if path is not None:
            save_corpus(documents, path, self.max_tokens)
        return documents


def split_corpus(documents: List[Document], train_fraction: float, val_fraction: float) -> Dict[str, List[Document]]:
    """Per-kind head/middle/tail split into train, val and test."""
    splits: Dict[str, List[Document]] = {"train": [], "val": [], "test": []}
    for kind in DocumentKind:
        group = [doc for doc in documents if doc.kind == kind]
        n_train = int(round(len(group) * train_fraction))
        n_val = int(round(len(group) * val_fraction))
        splits["train"].extend(group[:n_train])
        splits["val"].extend(group[n_train : n_train + n_val])
        splits["test"].extend(group[n_train + n_val :])
    return splits
