import json

import pytest
import torch

from recdistill import corpus
from recdistill.seqmodel import ModelSpec, TrainConfig
from recdistill.synthbench import OracleHandle, WorldSpec, build_world, generate

torch.set_num_threads(1)


@pytest.fixture
def write_log(tmp_path):
    """Write interaction lines to a file and return its path."""
    def _write(lines, name="events.tsv"):
        path = tmp_path / name
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path
    return _write


@pytest.fixture(scope="session")
def toy_world():
    spec = WorldSpec(num_users=40, num_items=12, k=2, seq_len=8, seed=3, swap_prob=0.3)
    return spec, build_world(spec)


@pytest.fixture(scope="session")
def toy_data(toy_world):
    """Filtered synthetic log, its splits and an oracle handle."""
    spec, world = toy_world
    log, _ = generate(world, seq_len=spec.seq_len)
    log = corpus.filter_min_interactions(log, 2)
    parts = corpus.partition(corpus.build_sequences(log, max_len=4))
    return log, parts, OracleHandle.from_log(world, log)


@pytest.fixture
def tiny_spec(toy_data):
    log, _, _ = toy_data
    return ModelSpec("gru", log.catalog_size, 4, embedding_size=8, dropout=0.1, layers=1)


@pytest.fixture
def tiny_train():
    return TrainConfig(learning_rate=0.01, batch_size=16, max_epochs=2, early_stop_patience=2)


@pytest.fixture
def synth_config(tmp_path):
    """Write a small synthetic experiment config and return (path, dict)."""
    def _make(**changes):
        data = {
            "dataset": {
                "synth": {"num_users": 30, "num_items": 15, "k": 2, "seq_len": 6, "seed": 1},
                "min_interactions": 2,
                "max_len": 4,
            },
            "method": "base",
            "teacher": {"m": 2, "noise_dim": 4},
            "train": {"learning_rate": 0.01, "batch_size": 32, "max_epochs": 1, "early_stop_patience": 1},
            "embedding_size": 8,
            "seeds": [0],
            "output_dir": str(tmp_path / "runs"),
        }
        for key, value in changes.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        path = tmp_path / "config.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return path, data
    return _make
