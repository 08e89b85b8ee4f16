"""Shared fixtures: a desk-scale config and a small generated dataset."""

from __future__ import annotations

import pytest

from lavseg.config import RunConfig, resolve_config
from lavseg.data import build_dataset, load_manifest, load_split


TINY_DOC = {
    "data": {"height": 16, "width": 16, "num_frames": 2,
             "min_size": 2, "max_size": 2, "min_objects": 2, "max_objects": 2},
    "enc": {"d_audio": 4, "d_visual": 8, "d_text": 8},
    "fusion": {"layers": 1, "dim": 8, "heads": 2},
    "seg": {"d_model": 8, "d_mem": 4, "heads": 2},
    "train": {"total_steps": 4, "warmup": 1, "batch": 2, "accum": 1,
              "lr": 1e-3},
}


def tiny_config(**overrides) -> RunConfig:
    doc = {k: dict(v) for k, v in TINY_DOC.items()}
    for section, kv in overrides.items():
        doc.setdefault(section, {}).update(kv)
    return resolve_config(doc)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small on-disk dataset at the tiny geometry, all four splits."""
    root = tmp_path_factory.mktemp("tiny-data")
    cfg = tiny_config()
    build_dataset(3, cfg.data, root, n_train=4, n_seen=2, n_unseen=2, n_null=1)
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset):
    return load_manifest(tiny_dataset)


@pytest.fixture(scope="session")
def tiny_train_samples(tiny_manifest):
    return load_split(tiny_manifest, "train")
