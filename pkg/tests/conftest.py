"""Shared fixtures: tiny on-disk corpora and a small train config."""

import pytest

from semgan.data import default_domain_spec, write_corpus
from semgan.trainer import TrainConfig


TINY_H, TINY_W = 16, 16


@pytest.fixture(scope="session")
def tiny_corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpora")
    write_corpus(root / "virtual", default_domain_spec("virtual"), 4, TINY_H, TINY_W, seed=100)
    write_corpus(root / "real", default_domain_spec("real"), 5, TINY_H, TINY_W, seed=200)
    return root / "virtual", root / "real"


def tiny_config(out_dir, **overrides) -> TrainConfig:
    base = dict(
        epochs=2,
        image_height=TINY_H,
        image_width=TINY_W,
        num_classes=4,
        history_capacity=3,
        seed=7,
        gen_depth=2,
        gen_base_width=4,
        disc_base_width=4,
        disc_blocks=2,
        checkpoint_dir=str(out_dir / "checkpoints"),
        metrics_path=str(out_dir / "metrics.csv"),
    )
    base.update(overrides)
    return TrainConfig(**base)
