"""Tests for relation heads and fine-tuning."""

import numpy as np
import pytest

from src.core.config import derive_settings
from src.core.exceptions import CorpusValidationError, LabelError, ParameterError
from src.models.relation import RelationKind
from src.nn.optim import Adam
from src.nn.relhead import head_prefix, relation_scores
from src.services.corpus_service import gt_relation_matrix
from src.services.finetune_service import RelationFinetuner, pair_weights
from src.services.pretrain_service import RCMPretrainer
from src.services.synth_service import DocumentGenerator


@pytest.fixture
def pretrained(tiny_config):
    return RCMPretrainer(tiny_config).init_state().online


@pytest.fixture
def table(tiny_config):
    return DocumentGenerator.from_settings(tiny_config).gen_table(2, 3, 4, "t")


def test_pair_weights_balance_classes():
    targets = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    valid = np.array([True, True, True, True, False, True])
    weights = pair_weights(targets, valid, reweight=True)
    np.testing.assert_allclose(weights, [4.0, 1.0, 1.0, 1.0, 0.0, 1.0])
    np.testing.assert_allclose(pair_weights(targets, valid, reweight=False), valid.astype(float))


def test_head_starts_from_the_pretrained_aggregator(tiny_config, pretrained):
    finetuner = RelationFinetuner(tiny_config)
    params = finetuner.init_params("row", pretrained, pretrained=pretrained)
    prefix = head_prefix("row")
    np.testing.assert_array_equal(params[f"{prefix}.aggregator.fc1.weight"], pretrained["lrcm.aggregator.fc1.weight"])
    assert f"{prefix}.classifier.fc2.weight" in params
    assert not any(name.startswith(("lrcm.", "grcm.", "mvlm.")) for name in params)

    random_init = RelationFinetuner(derive_settings(tiny_config, {"finetune.init_aggregator": "random"}))
    fresh = random_init.init_params("row", pretrained, pretrained=pretrained)
    assert not np.array_equal(fresh[f"{prefix}.aggregator.fc1.weight"], pretrained["lrcm.aggregator.fc1.weight"])


def test_prediction_shape_and_threshold(tiny_config, pretrained, table):
    finetuner = RelationFinetuner(tiny_config)
    params = finetuner.init_params(RelationKind.COL, pretrained, pretrained)
    matrix = finetuner.predict_relation_matrix(table, params, RelationKind.COL, threshold=0.3)
    assert matrix.n == 6 and matrix.kind == RelationKind.COL
    np.testing.assert_array_equal(matrix.decisions, matrix.scores > 0.3)
    with pytest.raises(ParameterError):
        finetuner.predict_relation_matrix(table, params, RelationKind.COL, threshold=1.0)
    with pytest.raises(ParameterError):
        finetuner.predict_relation_matrix(table, params, RelationKind.ROW)


def test_scores_are_directional(tiny_config, pretrained, table):
    finetuner = RelationFinetuner(tiny_config)
    params = finetuner.init_params(RelationKind.KV, pretrained, pretrained)
    p = params.bind(False)
    features, _ = finetuner.encoder.features(finetuner.encoder.tokenize(table), p)
    scores = relation_scores(features.m, p, RelationKind.KV)
    assert scores.shape == (6, 6)
    assert not np.allclose(scores, scores.T)


def test_predicted_scores_are_the_head_scores(tiny_config, pretrained, table):
    finetuner = RelationFinetuner(tiny_config)
    params = finetuner.init_params(RelationKind.ROW, pretrained, pretrained)
    p = params.bind(False)
    features, _ = finetuner.encoder.features(finetuner.encoder.tokenize(table), p)
    matrix = finetuner.predict_relation_matrix(table, params, RelationKind.ROW)
    np.testing.assert_array_equal(matrix.scores, relation_scores(features.m, p, RelationKind.ROW))


def test_step_rejects_wrong_labels(tiny_config, pretrained, table):
    finetuner = RelationFinetuner(tiny_config)
    params = finetuner.init_params("row", pretrained, pretrained)
    with pytest.raises(LabelError):
        finetuner.finetune_step([table], [gt_relation_matrix(table, "col")], params, "row", Adam(0.01, 1))
    with pytest.raises(LabelError):
        finetuner.train([table], "kv", params, epochs=1)


def test_step_updates_encoder_and_head(tiny_config, pretrained, table):
    finetuner = RelationFinetuner(tiny_config)
    params = finetuner.init_params("row", pretrained, pretrained)
    before = params.copy()
    params, loss, norm, lr = finetuner.finetune_step([table], [gt_relation_matrix(table, "row")], params, "row",
                                                     Adam(0.01, 1))
    assert np.isfinite(loss) and norm > 0 and lr == pytest.approx(0.01)
    assert not np.array_equal(before["encoder.token"], params["encoder.token"])
    assert not np.array_equal(before["relhead.row.classifier.fc2.weight"], params["relhead.row.classifier.fc2.weight"])


@pytest.mark.slow
def test_fitting_one_table_lowers_the_loss(tiny_config, pretrained, table):
    config = derive_settings(tiny_config, {"finetune.lr": 0.01})
    finetuner = RelationFinetuner(config)
    params = finetuner.init_params("row", pretrained, pretrained)
    params, records = finetuner.train([table], "row", params, epochs=40)
    assert len(records) == 40
    assert records[-1].loss < records[0].loss


def test_training_rejects_entities_over_the_token_budget(tiny_config, pretrained, table_doc):
    tight = RelationFinetuner(derive_settings(tiny_config, {"corpus.max_tokens_per_entity": 1}))
    params = tight.init_params("row", pretrained, pretrained)
    with pytest.raises(CorpusValidationError) as excinfo:
        tight.train([table_doc], "row", params, epochs=1)
    assert excinfo.value.entity_id == 0
