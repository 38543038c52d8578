"""Named-tensor checkpoint files.

Layout: the magic line ``RCMT1``, an 8-byte little-endian manifest length,
a UTF-8 JSON manifest, then every tensor's raw little-endian float64 data
in manifest order. The manifest lists ``name``, ``shape`` and byte
``offset`` (relative to the data block) per tensor plus free-form metadata.
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from src.core.exceptions import CheckpointError
from src.nn.parameters import ParameterSet
from src.utils.logging import get_logger

logger = get_logger(__name__)

MAGIC = b"RCMT1\n"


def file_hash(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_checkpoint(params: ParameterSet, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    tensors = []
    blobs = []
    offset = 0
    for name in params.names():
        data = np.ascontiguousarray(params[name], dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(params[name].shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"tensors": tensors, "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(blobs)


def save_checkpoint(path: Union[str, Path], params: ParameterSet, metadata: Optional[Dict[str, Any]] = None) -> str:
    """Write ``params``; returns the SHA-256 of the file."""
    if not params.is_finite():
        raise CheckpointError(f"refusing to save non-finite parameters to {path}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(params, metadata)
    path.write_bytes(payload)
    digest = hashlib.sha256(payload).hexdigest()
    logger.info(f"Saved checkpoint {path} ({len(params)} tensors, sha256 {digest[:12]})")
    return digest


def decode_checkpoint(payload: bytes) -> Tuple[ParameterSet, Dict[str, Any]]:
    if not payload.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    start = len(MAGIC)
    if len(payload) < start + 8:
        raise CheckpointError("truncated checkpoint header")
    (length,) = struct.unpack("<Q", payload[start : start + 8])
    body = start + 8 + length
    try:
        manifest = json.loads(payload[start + 8 : body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable manifest: {e}") from None
    params = ParameterSet()
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin = body + entry["offset"]
        end = begin + 8 * count
        if end > len(payload):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the file")
        params[entry["name"]] = np.frombuffer(payload[begin:end], dtype="<f8").reshape(shape)
    return params, manifest.get("metadata", {})


def load_checkpoint(path: Union[str, Path]) -> Tuple[ParameterSet, Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())
