"""Tests for stage hashing and reuse."""

from src.core.config import derive_settings
from src.services.pipeline_service import PipelineService


def test_changing_the_split_invalidates_trained_stages(tiny_config):
    config = derive_settings(tiny_config, {"pretrain.steps": 1})
    pipeline = PipelineService(config)
    corpus = pipeline.gen()
    first = pipeline.pretrain(corpus)
    assert not first.skipped

    resplit = PipelineService(derive_settings(config, {"corpus.train_fraction": 0.6}))
    resplit_corpus = resplit.gen()
    assert resplit_corpus.manifest["corpus_hash"] == corpus.manifest["corpus_hash"]
    second = resplit.pretrain(resplit_corpus)
    assert second.skipped is False
    assert second.directory != first.directory

    again = PipelineService(config).pretrain(corpus)
    assert again.skipped is True
    assert again.directory == first.directory


def test_split_key_follows_the_fractions(tiny_config):
    key = PipelineService(tiny_config).split_key()
    assert key == {"train_fraction": 0.5, "val_fraction": 0.2}
    other = PipelineService(derive_settings(tiny_config, {"corpus.val_fraction": 0.3})).split_key()
    assert other["val_fraction"] == 0.3
