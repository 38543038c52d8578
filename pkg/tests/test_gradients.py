"""Finite-difference checks of every parameter tensor through encoder and heads."""

from typing import Callable

import numpy as np
import pytest

from src.core import autodiff as ad
from src.core.config import derive_settings
from src.core.rng import derive_seed
from src.models.relation import RelationKind
from src.nn.parameters import Bound, ParameterSet, gradients_of
from src.services.augment_service import sample_positive_view
from src.services.corpus_service import gt_relation_matrix
from src.services.finetune_service import RelationFinetuner
from src.services.pretrain_service import RCMPretrainer, target_view
from src.services.synth_service import DocumentGenerator

EPS = 1e-6
COORDS_PER_TENSOR = 2
FAST_SEEDS = [0]
ALL_SEEDS = list(range(20))


def check_parameters(loss_fn: Callable[[Bound], ad.Node], params: ParameterSet, seed: int) -> None:
    """backward() against central differences on a few random coordinates of every tensor."""
    bound = params.bind(True)
    ad.backward(loss_fn(bound))
    grads = gradients_of(bound)
    rng = np.random.default_rng(seed)
    checked = 0
    for name in params.names():
        array = params[name]
        for flat in rng.choice(array.size, size=min(COORDS_PER_TENSOR, array.size), replace=False):
            index = np.unravel_index(flat, array.shape)
            original = array[index]
            array[index] = original + EPS
            plus = float(loss_fn(params.bind(False)).value)
            array[index] = original - EPS
            minus = float(loss_fn(params.bind(False)).value)
            array[index] = original
            numeric = (plus - minus) / (2.0 * EPS)
            assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-8), f"{name}{index}"
            checked += 1
    assert checked > 0


@pytest.fixture
def model_config(tiny_config):
    return derive_settings(
        tiny_config,
        {"model.hidden": 16, "model.layers": 2, "model.init_scale": 0.2, "pretrain.mask_rate": 0.6},
    )


def documents(config, seed):
    generator = DocumentGenerator.from_settings(config)
    return [
        generator.gen_table(2, 2, seed, "t"),
        generator.gen_form(2, seed + 1, "f"),
        generator.gen_paragraphs(3, seed + 2, "p"),
    ]


def pretrain_case(config, tasks: str, seed: int):
    """Online parameters with live predictors, a perturbed target and fixed views."""
    trainer = RCMPretrainer(derive_settings(config, {"pretrain.tasks": tasks}))
    state = trainer.init_state(seed)
    rng = np.random.default_rng(seed)
    for name in state.online.names():
        if name.endswith("fc2.weight") and "predictor" in name:
            state.online[name] = rng.normal(0.0, 0.2, size=state.online[name].shape)
    target = target_view(state.online)
    for name in target.names():
        target[name] = target[name] + rng.normal(0.0, 0.05, size=target[name].shape)
    batch = documents(config, seed)
    seeds = [derive_seed(seed, "doc", index) for index in range(len(batch))]
    views = []
    for doc, doc_seed in zip(batch, seeds):
        v1, _ = sample_positive_view(doc, derive_seed(doc_seed, "view", 1))
        v2, _ = sample_positive_view(doc, derive_seed(doc_seed, "view", 2))
        views.append((v1, v2))
    target_bound = target.bind(False)
    return state.online, lambda p: trainer.batch_losses(views, p, target_bound, seeds)


def run_pretrain_check(config, tasks: str, term: str, seed: int) -> None:
    online, losses = pretrain_case(config, tasks, seed)
    if term == "total":
        loss_fn = lambda p: losses(p).total()  # noqa: E731
    else:
        loss_fn = lambda p: getattr(losses(p), term)  # noqa: E731
    assert loss_fn(online.bind(False)) is not None
    check_parameters(loss_fn, online, seed)


def run_finetune_check(config, kind: RelationKind, seed: int) -> None:
    pretrained = RCMPretrainer(config).init_state(seed).online
    finetuner = RelationFinetuner(config)
    params = finetuner.init_params(kind, pretrained, pretrained, seed=seed)
    table, form, _ = documents(config, seed)
    batch = [form] if kind == RelationKind.KV else [table]
    gt = [gt_relation_matrix(doc, kind) for doc in batch]
    check_parameters(lambda p: finetuner.batch_loss(batch, gt, p, kind), params, seed)


PRETRAIN_CASES = [
    ("lrcm", "lrcm"),
    ("grcm", "grcm"),
    ("mvlm", "mvlm"),
    ("mvlm+lrcm+grcm", "total"),
]


@pytest.mark.parametrize("tasks,term", PRETRAIN_CASES)
@pytest.mark.parametrize("seed", FAST_SEEDS)
def test_pretrain_loss_gradients(model_config, tasks, term, seed):
    run_pretrain_check(model_config, tasks, term, seed)


@pytest.mark.parametrize("kind", [RelationKind.ROW, RelationKind.KV])
@pytest.mark.parametrize("seed", FAST_SEEDS)
def test_finetune_loss_gradients(model_config, kind, seed):
    run_finetune_check(model_config, kind, seed)


@pytest.mark.slow
@pytest.mark.parametrize("tasks,term", PRETRAIN_CASES)
@pytest.mark.parametrize("seed", ALL_SEEDS)
def test_pretrain_loss_gradients_over_seeds(model_config, tasks, term, seed):
    run_pretrain_check(model_config, tasks, term, seed)


@pytest.mark.slow
@pytest.mark.parametrize("kind", [RelationKind.ROW, RelationKind.COL, RelationKind.KV])
@pytest.mark.parametrize("seed", ALL_SEEDS)
def test_finetune_loss_gradients_over_seeds(model_config, kind, seed):
    run_finetune_check(model_config, kind, seed)
