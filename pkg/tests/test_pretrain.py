"""Tests for the pre-training loop and the EMA target."""

import numpy as np
import pytest

from src.core.config import derive_settings
from src.core.exceptions import CorpusValidationError, NonFiniteLossError, ParameterError, StateError
from src.models.document import Document, DocumentKind
from src.nn import rcm
from src.nn.optim import SGD
from src.nn.parameters import ParameterSet
from src.services.pretrain_service import ModelState, RCMPretrainer, ema_tau, ema_update, export_encoder, target_view
from src.services.synth_service import DocumentGenerator


def make_state(tau=0.9):
    online = ParameterSet({"encoder.w": np.array([1.0, 2.0]), "lrcm.predictor.fc1.weight": np.ones((2, 2))})
    target = ParameterSet({"encoder.w": np.array([0.0, 0.0])})
    return ModelState(online=online, target=target, tau_ema=tau)


def test_ema_update_formula():
    state = ema_update(make_state(0.9))
    np.testing.assert_allclose(state.target["encoder.w"], [0.1, 0.2])
    np.testing.assert_allclose(ema_update(make_state(), tau=1.0).target["encoder.w"], [0.0, 0.0])


def test_ema_target_closes_in_geometrically_on_a_fixed_online_set():
    rng = np.random.default_rng(4)
    online = ParameterSet({"encoder.w": rng.normal(size=(3, 4)), "lrcm.projector.fc1.weight": rng.normal(size=(4, 2))})
    start = ParameterSet({name: rng.normal(size=value.shape) for name, value in online.items()})
    state = ModelState(online=online, target=start.copy(), tau_ema=0.9)

    def distance(target):
        return np.sqrt(sum(np.sum((target[name] - online[name]) ** 2) for name in online))

    initial = distance(start)
    for k in range(1, 41):
        state = ema_update(state)
        assert distance(state.target) == pytest.approx(0.9**k * initial, rel=1e-9)
        for name, value in state.target.items():
            expected = 0.9**k * start[name] + (1.0 - 0.9**k) * online[name]
            np.testing.assert_allclose(value, expected, rtol=1e-9, atol=1e-12)


def test_ema_update_rejects_misaligned_sets():
    state = make_state()
    state.target["encoder.extra"] = np.zeros(1)
    with pytest.raises(StateError):
        ema_update(state)
    state = make_state()
    state.target["encoder.w"] = np.zeros(3)
    with pytest.raises(StateError):
        ema_update(state)


def test_model_state_checks_ranges():
    with pytest.raises(ParameterError):
        make_state(tau=0.0)
    with pytest.raises(ParameterError):
        ModelState(online=ParameterSet(), target=ParameterSet(), tau_g=0.0)


def test_cosine_ema_schedule():
    assert ema_tau(0.99, 1.0, "constant", 5, 10) == 0.99
    assert ema_tau(0.99, 1.0, "cosine", 0, 10) == pytest.approx(0.99)
    assert ema_tau(0.99, 1.0, "cosine", 5, 10) == pytest.approx(0.995)
    assert ema_tau(0.99, 1.0, "cosine", 10, 10) == pytest.approx(1.0)


def test_target_view_drops_online_only_heads(tiny_config):
    state = RCMPretrainer(tiny_config).init_state()
    assert any(name.startswith(rcm.LRCM_PREDICTOR) for name in state.online)
    assert any(name.startswith(rcm.MVLM_HEAD) for name in state.online)
    assert not any(name.startswith(rcm.ONLINE_ONLY) for name in state.target)
    assert any(name.startswith(rcm.LRCM_PROJECTOR) for name in state.target)
    assert set(target_view(state.online).names()) == set(state.target.names())
    assert all(name.startswith("encoder.") for name in export_encoder(state))


def test_init_is_seeded(tiny_config):
    trainer = RCMPretrainer(tiny_config)
    assert trainer.init_state(1).online.fingerprint() == trainer.init_state(1).online.fingerprint()
    assert trainer.init_state(1).online.fingerprint() != trainer.init_state(2).online.fingerprint()


@pytest.fixture
def tiny_docs(tiny_config):
    generator = DocumentGenerator.from_settings(tiny_config)
    return [generator.gen_table(2, 2, 0, "t"), generator.gen_form(2, 1, "f"), generator.gen_paragraphs(3, 2, "p")]


def test_step_moves_online_and_target(tiny_config, tiny_docs):
    trainer = RCMPretrainer(derive_settings(tiny_config, {"pretrain.mask_rate": 0.5}))
    state = trainer.init_state()
    online_before, target_before = state.online.copy(), state.target.copy()
    state, record = trainer.pretrain_step(tiny_docs, state, seed=5, optimizer=SGD(0.05, 1))
    assert record.step == state.step == 1
    assert record.l_lrcm is not None and record.l_grcm is not None and record.l_mvlm is not None
    assert record.l_byol is None
    assert np.isfinite(record.total) and record.grad_norm > 0
    assert online_before.fingerprint() != state.online.fingerprint()
    for name, value in state.target.items():
        expected = 0.99 * target_before[name] + 0.01 * state.online[name]
        np.testing.assert_allclose(value, expected)


def test_task_subsets(tiny_config, tiny_docs):
    config = derive_settings(tiny_config, {"pretrain.tasks": "grcm+byol", "pretrain.symmetric": False})
    trainer = RCMPretrainer(config)
    state = trainer.init_state()
    assert not any(name.startswith("lrcm.") for name in state.online)
    _, record = trainer.pretrain_step(tiny_docs[:2], state, seed=0, optimizer=SGD(0.01, 1))
    assert record.l_lrcm is None and record.l_mvlm is None
    assert record.l_grcm is not None and record.l_byol is not None


def test_non_finite_loss_names_the_documents(tiny_config, tiny_docs):
    trainer = RCMPretrainer(tiny_config)
    state = trainer.init_state()
    state.online["encoder.token"] = state.online["encoder.token"] * np.inf
    with pytest.raises(NonFiniteLossError) as excinfo:
        trainer.pretrain_step(tiny_docs, state, seed=0, optimizer=SGD(0.01, 1))
    assert set(excinfo.value.doc_ids) == {"t", "f", "p"}


@pytest.mark.slow
def test_training_is_reproducible(tiny_config, tiny_docs):
    first, records = RCMPretrainer(tiny_config).train(tiny_docs, steps=3)
    second, _ = RCMPretrainer(tiny_config).train(tiny_docs, steps=3)
    assert [r.step for r in records] == [1, 2, 3]
    assert first.online.fingerprint() == second.online.fingerprint()
    assert first.target.fingerprint() == second.target.fingerprint()
    assert all(np.isfinite(r.total) for r in records)


def test_training_rejects_entities_over_the_token_budget(tiny_config, make_entity):
    long_entity = make_entity(1, (200, 10, 300, 50), (1, 2, 3))
    doc = Document(doc_id="long", kind=DocumentKind.PARAGRAPHS,
                   entities=(make_entity(0, (10, 10, 110, 50), (4,)), long_entity))
    with pytest.raises(CorpusValidationError) as excinfo:
        RCMPretrainer(tiny_config).train([doc], steps=1)
    assert excinfo.value.entity_id == 1
    assert "long" in str(excinfo.value)
