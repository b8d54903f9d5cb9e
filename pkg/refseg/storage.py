import csv
import json
import logging
import os

import torch

from refseg.data import ensure_parent
from refseg.metrics import write_header
from refseg.utils import config_hash


logger = logging.getLogger(__name__)


CHECKPOINT_FORMAT = "refseg-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, kind, config, state_dict, seed, run_hash=None):
    """
    JSON container with the producing config and every tensor as a
    shape-tagged flat list. Keys are sorted, so identical states give
    identical bytes. run_hash is the experiment config hash that the
    run's CSV headers carry; without it the model config is hashed.
    """
    ensure_parent(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "config_hash": run_hash or config_hash(config),
        "seed": seed,
        "tensors": {
            name: {
                "shape": list(tensor.shape),
                "data": tensor.detach().to(torch.float64).flatten().tolist(),
            }
            for name, tensor in state_dict.items()
        },
    }
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)
    logger.info(f"Saved {kind} checkpoint to {path}")
    return path


def load_checkpoint(path, kind=None):
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint {path} does not exist")
    try:
        with open(path, "r") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Unable to read checkpoint {path}: {e}")
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a refseg checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version {payload.get('version')}"
        )
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(
            f"Expected a {kind} checkpoint, {path} holds {payload.get('kind')}"
        )
    tensors = {}
    for name, record in payload["tensors"].items():
        tensor = torch.tensor(record["data"], dtype=torch.float64)
        try:
            tensors[name] = tensor.reshape(record["shape"])
        except RuntimeError:
            raise CheckpointError(f"Tensor {name} does not match its shape tag")
    payload["tensors"] = tensors
    return payload


def restore(model, tensors):
    """Load tensors into model after checking names and shapes."""
    expected = model.state_dict()
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        raise CheckpointError(
            f"Checkpoint does not fit the model: missing {missing}, "
            f"unexpected {unexpected}"
        )
    for name, tensor in expected.items():
        if tuple(tensors[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"Tensor {name} has shape {tuple(tensors[name].shape)}, "
                f"the configuration expects {tuple(tensor.shape)}"
            )
    model.load_state_dict(
        {name: t.to(expected[name].dtype) for name, t in tensors.items()}
    )
    return model


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else value


def write_records_csv(path, records, header=None, columns=None):
    """One row per record dict; missing cells stay empty."""
    ensure_parent(path)
    if columns is None:
        columns = []
        for record in records:
            columns.extend(k for k in record if k not in columns)
    with open(path, "w", newline="") as f:
        write_header(f, header)
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for record in records:
            writer.writerow([_cell(record.get(c)) for c in columns])
    logger.info(f"Wrote {len(records)} rows to {path}")
    return path
