"""Tests for documents, corpus files and ground-truth relations."""

import json

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.exceptions import CorpusParseError, CorpusValidationError, LabelError
from src.models.document import BBox, Document, DocumentKind, GroundTruth
from src.models.relation import RelationKind, RelationMatrix
from src.services.corpus_service import (
    gt_relation_matrix,
    labelled_kinds,
    load_corpus,
    parse_document,
    save_corpus,
    serialize_document,
    sort_entities,
)


def test_bbox_geometry():
    a = BBox(x0=0, y0=0, x1=10, y1=10)
    assert a.overlaps(BBox(x0=5, y0=5, x1=15, y1=15))
    assert not a.overlaps(BBox(x0=10, y0=0, x1=20, y1=10))
    assert a.y_overlaps(BBox(x0=50, y0=2, x1=60, y1=4))
    with pytest.raises(ValidationError):
        BBox(x0=10, y0=0, x1=10, y1=5)
    with pytest.raises(ValidationError):
        BBox(x0=0, y0=0, x1=1001, y1=5)


def test_document_rejects_overlaps(make_entity):
    with pytest.raises(ValidationError):
        Document(kind=DocumentKind.TABLE, entities=(make_entity(0, (0, 0, 50, 50)), make_entity(1, (40, 40, 90, 90))))


def test_document_rejects_bad_labels(make_entity):
    entities = (make_entity(0, (0, 0, 50, 50)), make_entity(1, (100, 0, 150, 50)))
    with pytest.raises(ValidationError):
        Document(kind=DocumentKind.FORM, entities=entities, labels=GroundTruth(kv_links=((0, 0),)))
    with pytest.raises(ValidationError):
        Document(kind=DocumentKind.TABLE, entities=entities, labels=GroundTruth(row_groups=((0,),)))
    with pytest.raises(ValidationError):
        Document(kind=DocumentKind.PARAGRAPHS, entities=entities, labels=GroundTruth(reading_order=(0, 0)))


def test_sort_entities_renumbers_and_remaps(make_entity):
    entities = (make_entity(0, (10, 200, 50, 240)), make_entity(1, (10, 10, 50, 50)), make_entity(2, (100, 10, 150, 50)))
    doc = Document(kind=DocumentKind.PARAGRAPHS, entities=entities, labels=GroundTruth(reading_order=(1, 2, 0)))
    ordered = sort_entities(doc)
    assert ordered.is_sorted()
    assert [e.bbox.y0 for e in ordered.entities] == [10, 10, 200]
    assert ordered.labels.reading_order == (0, 1, 2)
    assert sort_entities(ordered) == ordered


def test_gt_matrices(table_doc, paragraph_doc):
    row = gt_relation_matrix(table_doc, "row")
    assert row.kind == RelationKind.ROW
    expected = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]], dtype=bool)
    np.testing.assert_array_equal(row.decisions, expected)
    order = gt_relation_matrix(paragraph_doc, RelationKind.ORDER)
    np.testing.assert_array_equal(order.decisions, np.triu(np.ones((3, 3), dtype=bool), k=1))
    assert labelled_kinds(table_doc) == (RelationKind.ROW, RelationKind.COL)
    with pytest.raises(LabelError):
        gt_relation_matrix(table_doc, RelationKind.KV)


def test_relation_matrix_consistency():
    matrix = RelationMatrix.from_scores(RelationKind.KV, np.array([[0.1, 0.9], [0.5, 0.2]]), threshold=0.5)
    np.testing.assert_array_equal(matrix.decisions, [[False, True], [False, False]])
    with pytest.raises(ValidationError):
        RelationMatrix(kind=RelationKind.KV, scores=np.array([[0.1, 0.9], [0.5, 0.2]]),
                       decisions=np.ones((2, 2), dtype=bool))
    with pytest.raises(ValidationError):
        RelationMatrix.from_scores(RelationKind.KV, np.array([[1.5]]))


def test_corpus_round_trip(tmp_path, table_doc, paragraph_doc):
    path = tmp_path / "corpus.jsonl"
    assert save_corpus([table_doc, paragraph_doc], path) == 2
    loaded = load_corpus(path)
    assert loaded == [table_doc, paragraph_doc]
    assert [serialize_document(d) for d in loaded] == path.read_text().splitlines()


def test_parse_errors_carry_line_numbers(tmp_path, table_doc):
    path = tmp_path / "corpus.jsonl"
    path.write_text(serialize_document(table_doc) + "\n\n{not json\n")
    with pytest.raises(CorpusParseError) as excinfo:
        load_corpus(path)
    assert excinfo.value.line_number == 3

    record = json.loads(serialize_document(table_doc))
    del record["kind"]
    with pytest.raises(CorpusParseError):
        parse_document(json.dumps(record), 7)


def test_invariant_errors_name_the_entity(table_doc):
    record = json.loads(serialize_document(table_doc))
    record["entities"][3]["bbox"] = {"x0": 20, "y0": 20, "x1": 60, "y1": 45}
    with pytest.raises(CorpusValidationError) as excinfo:
        parse_document(json.dumps(record), 4)
    assert excinfo.value.line_number == 4
    assert excinfo.value.entity_id == 3


def test_token_budget(tmp_path, table_doc):
    path = tmp_path / "corpus.jsonl"
    save_corpus([table_doc, table_doc], path)
    with pytest.raises(CorpusValidationError) as excinfo:
        load_corpus(path, max_tokens_per_entity=1)
    assert excinfo.value.line_number == 1
    assert excinfo.value.entity_id == 0
    assert len(load_corpus(path, max_tokens_per_entity=2)) == 2


def test_saving_checks_the_token_budget(tmp_path, table_doc):
    path = tmp_path / "corpus.jsonl"
    with pytest.raises(CorpusValidationError) as excinfo:
        save_corpus([table_doc], path, max_tokens_per_entity=1)
    assert excinfo.value.entity_id == 0
    assert save_corpus([table_doc], path, max_tokens_per_entity=2) == 1
