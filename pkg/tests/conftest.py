"""Shared fixtures."""

from pathlib import Path
from typing import Callable, Sequence, Tuple

import numpy as np
import pytest

from src.core import autodiff as ad
from src.core.config import ModelSettings, Settings, load_settings
from src.models.document import BBox, Document, DocumentKind, Entity, GroundTruth
from src.nn.encoder import DocumentEncoder
from src.nn.parameters import ParameterBuilder

CONFIG_DIR = Path(__file__).parent.parent / "config"
VOCAB = 16
PATCH = 2


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``fn`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + eps
        plus = fn()
        array[index] = original - eps
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad


@pytest.fixture
def gradcheck():
    """Compare backward() with finite differences for every input of ``build``."""

    def check(build: Callable[..., ad.Node], *arrays: np.ndarray, rtol: float = 1e-5, atol: float = 1e-7) -> None:
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        nodes = [ad.leaf(a) for a in arrays]
        ad.backward(build(*nodes))
        for node, array in zip(nodes, arrays):
            numeric = numerical_gradient(lambda: float(build(*[ad.constant(a) for a in arrays]).value), array)
            np.testing.assert_allclose(node.grad, numeric, rtol=rtol, atol=atol)

    return check


@pytest.fixture
def make_entity():
    def factory(entity_id: int, box: Tuple[int, int, int, int], tokens: Sequence[int] = (1,),
                shade: float = 0.5) -> Entity:
        return Entity(id=entity_id, tokens=tuple(tokens), bbox=BBox(x0=box[0], y0=box[1], x1=box[2], y1=box[3]),
                      patch=(shade,) * (PATCH * PATCH * 3))

    return factory


@pytest.fixture
def table_doc(make_entity) -> Document:
    """2 x 2 table with row and column labels."""
    entities = (
        make_entity(0, (10, 10, 110, 50), (1, 2)),
        make_entity(1, (200, 10, 300, 50), (3,)),
        make_entity(2, (10, 100, 110, 140), (4, 5)),
        make_entity(3, (200, 100, 300, 140), (6,)),
    )
    labels = GroundTruth(row_groups=((0, 1), (2, 3)), col_groups=((0, 2), (1, 3)))
    return Document(doc_id="table-x", kind=DocumentKind.TABLE, entities=entities, labels=labels)


@pytest.fixture
def paragraph_doc(make_entity) -> Document:
    entities = tuple(make_entity(i, (40, 40 + 50 * i, 160, 60 + 50 * i), (7 + i,)) for i in range(3))
    return Document(doc_id="para-x", kind=DocumentKind.PARAGRAPHS, entities=entities,
                    labels=GroundTruth(reading_order=(0, 1, 2)))


@pytest.fixture
def small_model() -> ModelSettings:
    return ModelSettings(hidden=8, layers=1, heads=2, ff_hidden=16, max_seq_len=64, n_cap=8)


@pytest.fixture
def encoder(small_model) -> DocumentEncoder:
    return DocumentEncoder(small_model, VOCAB, PATCH)


@pytest.fixture
def encoder_params(encoder):
    builder = ParameterBuilder(np.random.default_rng(0), 0.1)
    encoder.init_parameters(builder)
    return builder.build()


@pytest.fixture
def tiny_config(tmp_path) -> Settings:
    """The tiny preset writing under a temporary output root."""
    return load_settings(CONFIG_DIR / "tiny.yaml", [f"output_root={tmp_path}"])
