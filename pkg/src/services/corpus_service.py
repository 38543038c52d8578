"""Corpus storage and ground-truth relation derivation."""

import json
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from src.core.exceptions import CorpusParseError, CorpusValidationError, LabelError
from src.models.document import Document, DocumentKind, EntityInvariantError, GroundTruth
from src.models.relation import RelationKind, RelationMatrix
from src.utils.logging import get_logger

logger = get_logger(__name__)

KINDS_BY_DOCUMENT = {
    DocumentKind.TABLE: (RelationKind.ROW, RelationKind.COL),
    DocumentKind.FORM: (RelationKind.KV,),
    DocumentKind.PARAGRAPHS: (RelationKind.ORDER,),
}

# pydantic error types that mean the record is shaped wrongly rather than inconsistent
_STRUCTURAL_ERRORS = ("missing", "extra_forbidden", "model_type", "model_attributes_type", "enum")


def labelled_kinds(doc: Document) -> Tuple[RelationKind, ...]:
    """Relation kinds whose labels the document carries."""
    labels = doc.labels
    present = {
        RelationKind.ROW: labels.row_groups is not None,
        RelationKind.COL: labels.col_groups is not None,
        RelationKind.KV: labels.kv_links is not None,
        RelationKind.ORDER: labels.reading_order is not None,
    }
    return tuple(kind for kind in RelationKind if present[kind])


def sort_entities(doc: Document) -> Document:
    """Reorder entities top-left to bottom-right by (y0, x0) and renumber them 0..N-1.

    Labels are remapped to the new ids and written in canonical order, so the
    operation is idempotent.
    """
    ordered = sorted(doc.entities, key=lambda e: (e.bbox.y0, e.bbox.x0, e.id))
    new_id = {entity.id: index for index, entity in enumerate(ordered)}
    entities = tuple(entity.model_copy(update={"id": new_id[entity.id]}) for entity in ordered)

    def remap_groups(groups):
        if groups is None:
            return None
        return tuple(sorted(tuple(sorted(new_id[i] for i in group)) for group in groups))

    labels = doc.labels
    kv_links = None
    if labels.kv_links is not None:
        kv_links = tuple(sorted((new_id[k], new_id[v]) for k, v in labels.kv_links))
    reading_order = None
    if labels.reading_order is not None:
        reading_order = tuple(new_id[i] for i in labels.reading_order)

    return Document(
        doc_id=doc.doc_id,
        kind=doc.kind,
        entities=entities,
        labels=GroundTruth(
            row_groups=remap_groups(labels.row_groups),
            col_groups=remap_groups(labels.col_groups),
            kv_links=kv_links,
            reading_order=reading_order,
        ),
    )


def gt_relation_matrix(doc: Document, kind: Union[RelationKind, str]) -> RelationMatrix:
    """Ground-truth relation matrix, indexed by entity id."""
    kind = RelationKind.parse(kind)
    n = doc.n_entities
    labels = doc.labels
    decisions = np.zeros((n, n), dtype=bool)
    if kind in (RelationKind.ROW, RelationKind.COL):
        groups = labels.row_groups if kind == RelationKind.ROW else labels.col_groups
        if groups is None:
            raise LabelError(f"document {doc.doc_id or '<unnamed>'} has no {kind.value} groups")
        for group in groups:
            members = np.array(group)
            decisions[np.ix_(members, members)] = True
    elif kind == RelationKind.KV:
        if labels.kv_links is None:
            raise LabelError(f"document {doc.doc_id or '<unnamed>'} has no kv links")
        for key, value in labels.kv_links:
            decisions[key, value] = True
    else:
        if labels.reading_order is None:
            raise LabelError(f"document {doc.doc_id or '<unnamed>'} has no reading order")
        rank = np.empty(n, dtype=np.int64)
        rank[np.array(labels.reading_order)] = np.arange(n)
        decisions = rank[:, None] < rank[None, :]
    return RelationMatrix.from_decisions(kind, decisions)


def check_token_budget(doc: Document, max_tokens_per_entity: int) -> None:
    for entity in doc.entities:
        if len(entity.tokens) > max_tokens_per_entity:
            raise CorpusValidationError(
                f"{doc.doc_id or '<unnamed>'}: {len(entity.tokens)} tokens exceed the limit of {max_tokens_per_entity}",
                entity_id=entity.id,
            )


def _validation_failure(error: ValidationError, record: dict, line_number: int) -> Exception:
    first = error.errors()[0]
    if first["type"] in _STRUCTURAL_ERRORS or first["type"].endswith("_type") or first["type"].endswith("_parsing"):
        where = ".".join(str(part) for part in first["loc"])
        return CorpusParseError(f"{where}: {first['msg']}", line_number)
    cause = (first.get("ctx") or {}).get("error")
    entity_id = cause.entity_id if isinstance(cause, EntityInvariantError) else None
    loc = first["loc"]
    if entity_id is None and len(loc) >= 2 and loc[0] == "entities" and isinstance(loc[1], int):
        raw_entities = record.get("entities") or []
        raw = raw_entities[loc[1]] if loc[1] < len(raw_entities) else {}
        entity_id = raw.get("id", loc[1]) if isinstance(raw, dict) else loc[1]
    return CorpusValidationError(first["msg"], line_number=line_number, entity_id=entity_id)


def parse_document(line: str, line_number: int = 1) -> Document:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise CorpusParseError(f"not valid JSON ({e.msg})", line_number) from None
    if not isinstance(record, dict):
        raise CorpusParseError("record is not an object", line_number)
    try:
        return Document.model_validate(record)
    except ValidationError as e:
        raise _validation_failure(e, record, line_number) from None


def load_corpus(path: Union[str, Path], max_tokens_per_entity: Optional[int] = None) -> List[Document]:
    """Read a corpus file, validating every document."""
    documents = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            doc = parse_document(line, line_number)
            if max_tokens_per_entity is not None:
                try:
                    check_token_budget(doc, max_tokens_per_entity)
                except CorpusValidationError as e:
                    raise CorpusValidationError(e.message, line_number=line_number, entity_id=e.entity_id) from None
            documents.append(doc)
    logger.info(f"Loaded {len(documents)} documents from {path}")
    return documents


def serialize_document(doc: Document) -> str:
    """One canonical corpus line (floats keep their shortest round-trip repr)."""
    return json.dumps(doc.model_dump(mode="json"), separators=(",", ":"), ensure_ascii=False)


def save_corpus(
    documents: Iterable[Document], path: Union[str, Path], max_tokens_per_entity: Optional[int] = None
) -> int:
    """Write one line per document; with a budget, an over-long entity aborts the write."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for doc in documents:
            if max_tokens_per_entity is not None:
                check_token_budget(doc, max_tokens_per_entity)
            handle.write(serialize_document(doc) + "\n")
            count += 1
    logger.info(f"Saved {count} documents to {path}")
    return count
