"""
Checkpoint Format
SKMAE1 binary checkpoints: magic, JSON metadata block, little-endian float32 payload
"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointFormatError, CheckpointMismatchError, NonFiniteError

logger = logging.getLogger(__name__)

MAGIC = b"SKMAE1"
FORMAT_VERSION = 1
KIND_MAE = "mae"
KIND_SSL = "ssl"

_LENGTH = struct.Struct("<I")
_FLOAT = np.dtype("<f4")


@dataclass
class Checkpoint:
    """Decoded checkpoint: ordered tensors plus metadata"""

    kind: str
    tensors: "OrderedDict[str, torch.Tensor]"
    config: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    path: Optional[str] = None

    def subset(self, prefix: str) -> "OrderedDict[str, torch.Tensor]":
        """Tensors under `prefix.`, with the prefix stripped."""
        start = prefix + "."
        return OrderedDict(
            (name[len(start):], tensor) for name, tensor in self.tensors.items() if name.startswith(start)
        )


def encode_checkpoint(tensors: Mapping[str, torch.Tensor], kind: str,
                      config: Optional[Dict[str, Any]] = None,
                      extra: Optional[Dict[str, Any]] = None) -> bytes:
    """Serialize tensors (in mapping order) and metadata into SKMAE1 bytes."""
    descriptors = []
    chunks = []
    for name, tensor in tensors.items():
        array = tensor.detach().cpu().to(torch.float32).numpy().astype(_FLOAT, copy=False)
        if not np.isfinite(array).all():
            raise NonFiniteError(f"Checkpoint tensor '{name}' holds non-finite values")
        descriptors.append({"name": name, "shape": list(array.shape)})
        chunks.append(np.ascontiguousarray(array).tobytes())

    metadata = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": descriptors,
        "extra": extra or {},
    }
    header = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(header)) + header + b"".join(chunks)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    """Parse SKMAE1 bytes; any structural problem raises CheckpointFormatError naming the source."""
    if not blob.startswith(MAGIC):
        raise CheckpointFormatError(f"{source}: not an SKMAE1 checkpoint (bad magic)")
    offset = len(MAGIC)
    if len(blob) < offset + _LENGTH.size:
        raise CheckpointFormatError(f"{source}: truncated header")
    (header_length,) = _LENGTH.unpack_from(blob, offset)
    offset += _LENGTH.size
    if len(blob) < offset + header_length:
        raise CheckpointFormatError(f"{source}: truncated metadata block")
    try:
        metadata = json.loads(blob[offset:offset + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{source}: unreadable metadata ({e})") from None
    offset += header_length

    version = metadata.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{source}: unsupported format version {version}")

    descriptors = metadata.get("tensors", [])
    expected = sum(int(np.prod(d["shape"], dtype=np.int64)) for d in descriptors) * _FLOAT.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise CheckpointFormatError(
            f"{source}: payload is {len(payload)} bytes, descriptors require {expected}"
        )

    values = np.frombuffer(payload, dtype=_FLOAT)
    if not np.isfinite(values).all():
        bad = int((~np.isfinite(values)).sum())
        raise CheckpointFormatError(f"{source}: payload holds {bad} non-finite value(s)")
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    cursor = 0
    for descriptor in descriptors:
        shape = tuple(int(s) for s in descriptor["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        array = values[cursor:cursor + count].astype(np.float32).reshape(shape)
        tensors[descriptor["name"]] = torch.from_numpy(array)
        cursor += count

    return Checkpoint(
        kind=metadata.get("kind", ""),
        tensors=tensors,
        config=metadata.get("config"),
        extra=metadata.get("extra", {}),
        format_version=version,
        path=source,
    )


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], kind: str,
                    config: Optional[Dict[str, Any]] = None,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    blob = encode_checkpoint(tensors, kind, config=config, extra=extra)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        raise CheckpointFormatError(f"Cannot write checkpoint {path}: {e}") from None
    logger.info(f"Saved {kind} checkpoint with {len(tensors)} tensors to {path}")
    return path


def load_checkpoint(path, kind: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"Cannot read checkpoint {path}: {e}") from None
    checkpoint = decode_checkpoint(blob, source=str(path))
    if kind is not None and checkpoint.kind != kind:
        raise CheckpointFormatError(f"{path}: expected a '{kind}' checkpoint, found '{checkpoint.kind}'")
    return checkpoint


# Module and optimizer state

def module_tensors(module: nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    """Parameters of `module` in registration order, optionally prefixed."""
    head = f"{prefix}." if prefix else ""
    return OrderedDict((head + name, p.detach()) for name, p in module.named_parameters())


def load_module_tensors(module: nn.Module, tensors: Mapping[str, torch.Tensor], strict: bool = True,
                        prefix: str = "") -> None:
    """
    Copy checkpoint tensors into the parameters of `module`.

    Args:
        module: target module
        tensors: name -> tensor, names relative to `module`
        strict: require the name sets to match exactly
        prefix: checkpoint-side name prefix, used in error messages

    Raises:
        CheckpointMismatchError: naming the first missing, unexpected or mis-shaped tensor
    """
    head = f"{prefix}." if prefix else ""
    params = OrderedDict(module.named_parameters())
    if strict:
        for name in tensors:
            if name not in params:
                raise CheckpointMismatchError(head + name, reason="not present in the model")
    for name, param in params.items():
        if name not in tensors:
            raise CheckpointMismatchError(head + name, reason="missing from the checkpoint")
        source = tensors[name]
        if tuple(source.shape) != tuple(param.shape):
            raise CheckpointMismatchError(head + name, expected=param.shape, found=source.shape)
    with torch.no_grad():
        for name, param in params.items():
            param.copy_(tensors[name].to(param.dtype))


def adam_state_tensors(optimizer: torch.optim.Optimizer, module: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """First and second moment estimates keyed by parameter name."""
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, param in module.named_parameters():
        state = optimizer.state.get(param, {})
        if "exp_avg" in state:
            out[f"optim.{name}.exp_avg"] = state["exp_avg"]
            out[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"]
    return out


def restore_adam_state(optimizer: torch.optim.Optimizer, module: nn.Module,
                       checkpoint: Checkpoint, step: int) -> None:
    """Rebuild Adam moments from a checkpoint written by adam_state_tensors."""
    moments = checkpoint.subset("optim")
    state_dict = optimizer.state_dict()
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for index, (name, param) in enumerate(module.named_parameters()):
        key = f"{name}.exp_avg"
        if key not in moments:
            continue
        exp_avg = moments[key]
        exp_avg_sq = moments[f"{name}.exp_avg_sq"]
        if tuple(exp_avg.shape) != tuple(param.shape):
            raise CheckpointMismatchError(f"optim.{key}", expected=param.shape, found=exp_avg.shape)
        state[index] = {
            "step": torch.tensor(float(step)),
            "exp_avg": exp_avg.to(param.dtype).clone(),
            "exp_avg_sq": exp_avg_sq.to(param.dtype).clone(),
        }
    state_dict["state"] = state
    optimizer.load_state_dict(state_dict)
