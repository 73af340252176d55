"""Shared fixtures: small trained checkpoints and config documents."""
import json

import pytest

TOY_NETWORK = {
    "task": "classification",
    "input_width": 6,
    "num_classes": 3,
    "neighbor_count": 8,
    "arrangement": "parallel",
    "fusion": "concat",
    "seed": 0,
    "schedule": {
        "depths": [1, 1],
        "channels": [16, 32],
        "global_channel_ratios": [0.25, 0.5],
        "sampling_ratios": [0.25, 0.5],
        "downsample_strides": [1, 4],
    },
}

TOY_TRAINING = {
    "learning_rate": 0.005,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "epochs": 80,
    "seed": 13,
    "task": "classification",
    "target_metric": 1.0,
    "dataset": {
        "kinds": ["sphere", "cube", "torus"],
        "train_per_kind": 8,
        "test_per_kind": 4,
        "points": 96,
    },
}


def toy_config_doc():
    return {"schema_version": 1,
            "network": json.loads(json.dumps(TOY_NETWORK)),
            "training": json.loads(json.dumps(TOY_TRAINING))}


@pytest.fixture(scope="session")
def toy_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "toy.json"
    path.write_text(json.dumps(toy_config_doc(), indent=2))
    return path


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory, toy_config_path):
    """Train the toy classifier once per session through the CLI."""
    from appt.cli import main
    out = tmp_path_factory.mktemp("trained")
    code = main(["train", "--config", str(toy_config_path), "--out", str(out)])
    assert code == 0
    return out
