"""Shared fixtures.

The trained desk-scale run is expensive (tens of minutes on one CPU core), so
it is built once and cached under runs/ keyed by a hash of its configuration;
later sessions reuse the artifacts.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

TESTS_DIR = Path(__file__).resolve().parent
sys.path.insert(0, str(TESTS_DIR))  # makes `oracles` importable from tests

RUNS_DIR = TESTS_DIR.parent / "runs"

DESK_DATA = {"count": 200, "seed": 11, "size": 128, "split_seed": 13}
DESK_TRAIN = {"max_epochs": 48, "seed": 7}
DESK_TIME_CAP_MIN = 100.0


@pytest.fixture(scope="session")
def tiny_model():
    """Small codec for shape/gradient tests at 64 px."""
    from anatomy_cbir.networks import AnatomyCodec

    torch.manual_seed(0)
    return AnatomyCodec(image_size=64, num_codes=32, code_dim=16)


@pytest.fixture(scope="session")
def phantom_set_64():
    from anatomy_cbir.phantoms import DatasetSpec, make_phantom_dataset

    return make_phantom_dataset(DatasetSpec(count=12, seed=3, size=64))


def _desk_key() -> str:
    from anatomy_cbir.trainer import TrainConfig

    config = TrainConfig.desk(**DESK_TRAIN).to_dict()
    blob = json.dumps({"data": DESK_DATA, "train": config}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def make_desk_dataset():
    from anatomy_cbir.phantoms import DatasetSpec, make_phantom_dataset, split_dataset

    data = make_phantom_dataset(DatasetSpec(
        count=DESK_DATA["count"], seed=DESK_DATA["seed"], size=DESK_DATA["size"]))
    parts = split_dataset(data, seed=DESK_DATA["split_seed"])
    return data, parts


@pytest.fixture(scope="session")
def desk_run():
    """Trained desk-scale checkpoint + dataset splits (cached across sessions)."""
    from anatomy_cbir.checkpoint import load_checkpoint, restore_model
    from anatomy_cbir.trainer import CHECKPOINT_NAME, TrainConfig, train

    run_dir = RUNS_DIR / f"desk-{_desk_key()}"
    ckpt_path = run_dir / CHECKPOINT_NAME
    data, parts = make_desk_dataset()
    config = TrainConfig.desk(**DESK_TRAIN)

    if not ckpt_path.exists():
        t0 = time.monotonic()

        def progress(summary):
            print(f"  desk-train epoch {summary['epoch']}: total={summary['total']:.1f} "
                  f"({summary['seconds']:.0f}s)", flush=True)
            return (time.monotonic() - t0) <= DESK_TIME_CAP_MIN * 60

        result = train(parts["train"], config, run_dir, progress=progress)
        assert not result.diverged, "desk-scale training diverged"

    ckpt = load_checkpoint(ckpt_path)
    model = restore_model(ckpt)
    return {
        "run_dir": run_dir,
        "checkpoint_path": ckpt_path,
        "checkpoint": ckpt,
        "model": model,
        "config": config,
        "data": data,
        "train": parts["train"],
        "query": parts["query"],
        "reference": parts["reference"],
    }
