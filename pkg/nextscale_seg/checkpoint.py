"""
Checkpoints are directories: index.json (format version, stage tag, config echo, optimizer scalars, tensor list) and
one ARSG file per tensor under tensors/.
"""
import json
import logging
import os
import shutil

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import torch

from .errors import ConfigurationError, FormatError
from .tensorio import read_tensor, write_tensor

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"
CHECKPOINT_FORMAT = "nextscale-seg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    stage: int
    states: Dict[str, "OrderedDict[str, torch.Tensor]"]
    config: dict = field(default_factory=dict)
    optimizer: Optional[dict] = None
    rng_state: Optional[torch.Tensor] = None
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def restore(self, name, module):
        """Load the saved state of `name` into module (strict)."""
        if name not in self.states:
            raise ConfigurationError("stage-{} checkpoint has no '{}' state".format(self.stage, name))
        try:
            module.load_state_dict(self.states[name], strict=True)
        except RuntimeError as ex:
            raise ConfigurationError("checkpoint state '{}' does not fit the configured model: {}".format(
                name, str(ex).splitlines()[0]))
        return module

    def restore_optimizer(self, optimizer):
        if self.optimizer is not None:
            optimizer.load_state_dict(self.optimizer)
        return optimizer


# region Save


def _flatten_optimizer(state_dict):
    tensors, scalars = OrderedDict(), {}
    for index, entry in state_dict["state"].items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                tensors["{}.{}".format(index, key)] = value
            else:
                scalars["{}.{}".format(index, key)] = value
    return tensors, dict(param_groups=state_dict["param_groups"], scalars=scalars)


def save_checkpoint(path, stage, modules, config=None, optimizer=None, rng_state=None, extra=None):
    """
    :param path: checkpoint directory (replaced if it exists)
    :param stage: 1 or 2
    :param modules: dict name -> nn.Module (or state dict)
    :param config: json-serializable config echo
    :param optimizer: torch optimizer whose state is stored
    :param rng_state: torch RNG state (uint8 tensor)
    :param extra: json-serializable metadata
    """
    path = Path(path)
    tensor_dir = path / "tensors"
    if tensor_dir.exists():
        shutil.rmtree(tensor_dir)
    os.makedirs(tensor_dir)
    entries = []

    def put(group, name, tensor):
        file = "tensors/{:05d}.arsg".format(len(entries))
        crc = write_tensor(path / file, tensor.detach().cpu())
        entries.append(dict(group=group, name=name, file=file, crc32=crc))

    for module_name, module in modules.items():
        state = module.state_dict() if isinstance(module, torch.nn.Module) else module
        for name, tensor in state.items():
            put(module_name, name, tensor)
    optimizer_meta = None
    if optimizer is not None:
        tensors, optimizer_meta = _flatten_optimizer(optimizer.state_dict())
        for name, tensor in tensors.items():
            put("@optimizer", name, tensor)
    if rng_state is not None:
        put("@rng", "torch", rng_state)
    index = dict(format=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION, stage=stage, config=config or {},
                 modules=list(modules), optimizer=optimizer_meta, extra=extra or {}, tensors=entries)
    with open(path / INDEX_NAME, "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    logger.debug("saved stage-%d checkpoint with %d tensors to %s", stage, len(entries), path)
    return path


# endregion

# region Load


def _read_index(path):
    try:
        with open(path / INDEX_NAME) as f:
            index = json.load(f)
    except FileNotFoundError:
        raise FormatError("{}: checkpoint index is missing".format(path / INDEX_NAME))
    except json.JSONDecodeError as ex:
        raise FormatError("{}: invalid checkpoint index ({})".format(path / INDEX_NAME, ex))
    if index.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("{}: not a checkpoint".format(path))
    if index.get("version") != CHECKPOINT_VERSION:
        raise FormatError("{}: unsupported checkpoint version {} (expected {})".format(
            path, index.get("version"), CHECKPOINT_VERSION))
    return index


def load_checkpoint(path, expected_stage=None):
    """
    :param path: checkpoint directory
    :param expected_stage: reject checkpoints with another stage tag
    :return: Checkpoint
    """
    path = Path(path)
    index = _read_index(path)
    if expected_stage is not None and index["stage"] != expected_stage:
        raise ConfigurationError("{}: expected a stage-{} checkpoint, got stage {}".format(
            path, expected_stage, index["stage"]))
    states = OrderedDict((name, OrderedDict()) for name in index["modules"])
    optimizer_tensors, rng_state = {}, None
    for entry in index["tensors"]:
        tensor = torch.from_numpy(read_tensor(path / entry["file"], entry["crc32"]))
        if entry["group"] == "@optimizer":
            optimizer_tensors[entry["name"]] = tensor
        elif entry["group"] == "@rng":
            rng_state = tensor
        else:
            states[entry["group"]][entry["name"]] = tensor
    optimizer = None
    if index.get("optimizer") is not None:
        meta = index["optimizer"]
        state = {}
        for key, value in list(optimizer_tensors.items()) + list(meta["scalars"].items()):
            param, name = key.split(".", 1)
            state.setdefault(int(param), {})[name] = value
        optimizer = dict(state=state, param_groups=meta["param_groups"])
    return Checkpoint(stage=index["stage"], states=states, config=index["config"], optimizer=optimizer,
                      rng_state=rng_state, extra=index["extra"], version=index["version"])


def checkpoint_stage(path):
    return _read_index(Path(path))["stage"]

# endregion
