"""Checkpoints: one BNT1 float32 container per state entry plus a JSON index."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .container import read_tensor, write_tensor
from .dsl import ModelConfig
from .model import Network

INDEX = "checkpoint.json"


def save_checkpoint(net: Network, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for key, arr in net.state_dict().items():
        name = key.replace(".", "_") + ".bnt"
        write_tensor(directory / name, np.asarray(arr, dtype=np.float32))
        files[key] = name
    index = {"model": net.cfg.to_dict(), "quantize": net.quantize, "tensors": files}
    (directory / INDEX).write_text(json.dumps(index, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> Network:
    directory = Path(directory)
    index_path = directory / INDEX
    if not index_path.exists():
        raise FileNotFoundError(f"no {INDEX} in {directory}")
    index = json.loads(index_path.read_text())
    net = Network(ModelConfig.from_dict(index["model"]), quantize=index.get("quantize", True))
    net.load_state_dict({k: read_tensor(directory / f) for k, f in index["tensors"].items()})
    return net
