"""Tests for the synthetic document generator."""

import pytest

from src.core.exceptions import CapacityError, ParameterError
from src.models.document import DocumentKind
from src.models.relation import RelationKind
from src.services.augment_service import derive_layout_relations
from src.services.corpus_service import gt_relation_matrix, serialize_document
from src.services.synth_service import DocumentGenerator, Role, Vocabulary, split_corpus


@pytest.fixture
def generator():
    return DocumentGenerator(vocab_size=64, max_tokens_per_entity=3, patch_size=4, n_cap=40, max_seq_len=512)


@pytest.mark.parametrize("seed", range(5))
def test_tables_match_their_geometry(generator, seed):
    doc = generator.gen_table(3, 4, seed, "t")
    assert doc.n_entities == 12 and doc.is_sorted()
    assert len(doc.labels.row_groups) == 3 and all(len(g) == 4 for g in doc.labels.row_groups)
    for kind in (RelationKind.ROW, RelationKind.COL):
        assert derive_layout_relations(doc, kind, generator.vocab) == gt_relation_matrix(doc, kind)


@pytest.mark.parametrize("seed", range(5))
def test_forms_match_their_geometry(generator, seed):
    doc = generator.gen_form(6, seed, "f")
    assert doc.n_entities == 12
    roles = {generator.vocab.role_of(e.tokens[0]) for e in doc.entities}
    assert roles == {Role.KEY, Role.VALUE}
    assert derive_layout_relations(doc, RelationKind.KV, generator.vocab) == gt_relation_matrix(doc, RelationKind.KV)


@pytest.mark.parametrize("n", [2, 5, 13, 20])
def test_paragraphs_match_their_geometry(generator, n):
    doc = generator.gen_paragraphs(n, seed=n, doc_id="p")
    assert sorted(doc.labels.reading_order) == list(range(n))
    derived = derive_layout_relations(doc, RelationKind.ORDER, generator.vocab)
    assert derived == gt_relation_matrix(doc, RelationKind.ORDER)


def test_two_column_pages_read_left_column_first(generator):
    doc = generator.gen_paragraphs(14, seed=1, doc_id="p")
    by_id = doc.by_id()
    first_half = [by_id[i].bbox.x0 for i in doc.labels.reading_order[:7]]
    assert max(first_half) < 500
    assert min(by_id[i].bbox.x0 for i in doc.labels.reading_order[7:]) >= 500


def test_generation_is_reproducible(generator):
    a = generator.gen_form(4, 11, "f")
    b = generator.gen_form(4, 11, "f")
    assert serialize_document(a) == serialize_document(b)
    assert serialize_document(a) != serialize_document(generator.gen_form(4, 12, "f"))


def test_patches_and_tokens_stay_in_range(generator):
    doc = generator.gen_table(2, 2, 0)
    for entity in doc.entities:
        assert entity.patch_size == 4
        assert 1 <= len(entity.tokens) <= 3
        assert all(0 <= t < 64 for t in entity.tokens)


def test_capacity_and_shape_checks():
    small = DocumentGenerator(vocab_size=64, max_tokens_per_entity=3, n_cap=8)
    with pytest.raises(CapacityError):
        small.gen_table(3, 3, 0)
    short = DocumentGenerator(vocab_size=64, max_tokens_per_entity=3, max_seq_len=20)
    with pytest.raises(CapacityError):
        short.gen_paragraphs(5, 0)
    with pytest.raises(ParameterError):
        small.gen_table(1, 3, 0)
    with pytest.raises(ParameterError):
        small.gen_form(13, 0)
    with pytest.raises(ParameterError):
        Vocabulary(4)


def test_corpus_and_split(tiny_config, tmp_path):
    generator = DocumentGenerator.from_settings(tiny_config)
    path = tmp_path / "corpus.jsonl"
    docs = generator.gen_corpus({"table": 4, "form": 3, "paragraphs": 2}, 0, tiny_config, path)
    assert [d.doc_id for d in docs[:2]] == ["table-0", "table-1"]
    assert sum(1 for d in docs if d.kind == DocumentKind.FORM) == 3
    assert len(path.read_text().splitlines()) == 9
    splits = split_corpus(docs, 0.5, 0.25)
    assert sum(len(v) for v in splits.values()) == 9
    assert [d.doc_id for d in splits["train"] if d.kind == DocumentKind.TABLE] == ["table-0", "table-1"]
    assert [d.doc_id for d in splits["val"] if d.kind == DocumentKind.TABLE] == ["table-2"]
