"""Tensor archive container (CFW1)

layout: magic(8) | header_len(u64 LE) | header JSON | float32 LE payload | crc32(payload, u32 LE)
header: {"__metadata__": {...}, "<tensor name>": {"shape": [...], "offset": <payload byte offset>}}
"""

import json
from pathlib import Path
import struct
from typing import Any, Dict, Tuple
import zlib

import numpy as np
import torch

from ..core.constants import ARCHIVE_MAGIC
from ..core.exceptions import CustomError
from ..models.experiment import SteeringRegime
from ..models.graph import Graph, NodeId
from ..models.runtime import ModelConfig, WeightSet, expected_shapes
from ..models.steering import SteeringDirections
from .file_store import atomic_write_bytes

METADATA_KEY = "__metadata__"


def encode_container(tensors: Dict[str, torch.Tensor], metadata: Dict[str, Any] | None = None) -> bytes:
    header: Dict[str, Any] = {METADATA_KEY: metadata or {}}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        array = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        header[name] = {"shape": list(array.shape), "offset": offset}
        data = array.tobytes(order="C")
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        ARCHIVE_MAGIC,
        struct.pack("<Q", len(header_bytes)),
        header_bytes,
        payload,
        struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF),
    ])


def decode_container(blob: bytes, source: str = "<memory>") -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    if len(blob) < 16 or blob[:8] != ARCHIVE_MAGIC:
        raise CustomError("FORMAT_ERROR", "{source}: bad magic or truncated header", source=source)
    (header_len,) = struct.unpack("<Q", blob[8:16])
    payload_start = 16 + header_len
    if len(blob) < payload_start + 4:
        raise CustomError("FORMAT_ERROR", "{source}: truncated archive", source=source)
    try:
        header = json.loads(blob[16:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CustomError("FORMAT_ERROR", "{source}: unreadable header ({err})", source=source, err=e)

    payload = blob[payload_start:-4]
    (checksum,) = struct.unpack("<I", blob[-4:])
    metadata = header.pop(METADATA_KEY, {})

    tensors: Dict[str, torch.Tensor] = {}
    for name in sorted(header):
        entry = header[name]
        shape = tuple(int(s) for s in entry["shape"])
        start = int(entry["offset"])
        end = start + 4 * int(np.prod(shape, dtype=np.int64))
        if start < 0 or end > len(payload):
            raise CustomError("FORMAT_ERROR", "{source}: tensor {name} lies outside the payload",
                              source=source, name=name)
        array = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(array.astype(np.float32, copy=True))

    if zlib.crc32(payload) & 0xFFFFFFFF != checksum:
        first = sorted(header)[0] if header else "<none>"
        raise CustomError("FORMAT_ERROR", "{source}: checksum mismatch (first tensor {name})",
                          source=source, name=first)
    return tensors, metadata


def write_container(path: str | Path, tensors: Dict[str, torch.Tensor], metadata: Dict[str, Any] | None = None) -> Path:
    return atomic_write_bytes(path, encode_container(tensors, metadata))


def read_container(path: str | Path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CustomError("FORMAT_ERROR", "Archive {path} does not exist", path=str(path))
    return decode_container(path.read_bytes(), source=str(path))


# ===== weight archive =====

def save_weights(weights: WeightSet, path: str | Path, manifest_digest: str | None = None) -> Path:
    metadata = {"kind": "weights", "model_config": weights.config.model_dump(mode="json")}
    if manifest_digest:
        metadata["manifest_digest"] = manifest_digest
    return write_container(path, weights.tensors, metadata)


def load_weights(path: str | Path) -> WeightSet:
    tensors, metadata = read_container(path)
    if metadata.get("kind") != "weights" or "model_config" not in metadata:
        raise CustomError("FORMAT_ERROR", "{path} is not a weight archive", path=str(path))
    try:
        config = ModelConfig(**metadata["model_config"])
    except ValueError as e:
        raise CustomError("FORMAT_ERROR", "{path}: invalid model config ({err})", path=str(path), err=e)

    shapes = expected_shapes(config)
    for name in sorted(tensors):
        if name not in shapes:
            raise CustomError("FORMAT_ERROR", "Unknown tensor {name} in weight archive", name=name)
        if tuple(tensors[name].shape) != shapes[name]:
            raise CustomError("FORMAT_ERROR", "Tensor {name} has shape {got}, expected {want}",
                              name=name, got=tuple(tensors[name].shape), want=shapes[name])
    missing = sorted(set(shapes) - set(tensors))
    if missing:
        raise CustomError("FORMAT_ERROR", "Weight archive is missing tensor {name}", name=missing[0])
    return WeightSet(config, tensors).validate()


# ===== steering directions =====

DIRECTION_PREFIX = "dir/"


def save_directions(directions: SteeringDirections, path: str | Path, manifest_digest: str | None = None) -> Path:
    tensors = {f"{DIRECTION_PREFIX}{node.name}": v for node, v in directions.directions.items()}
    metadata = directions.metadata()
    if manifest_digest:
        metadata["manifest_digest"] = manifest_digest
    return write_container(path, tensors, metadata)


def load_directions(path: str | Path, graph: Graph | None = None) -> SteeringDirections:
    tensors, metadata = read_container(path)
    if metadata.get("kind") != "directions":
        raise CustomError("FORMAT_ERROR", "{path} is not a directions archive", path=str(path))
    if graph is not None and metadata.get("fingerprint") and metadata["fingerprint"] != graph.fingerprint:
        raise CustomError("ARTIFACT_MISMATCH", "{path}: directions fingerprint {got} does not match graph {want}",
                          path=str(path), got=metadata["fingerprint"], want=graph.fingerprint)
    directions = {}
    for name, tensor in tensors.items():
        if not name.startswith(DIRECTION_PREFIX):
            raise CustomError("FORMAT_ERROR", "Unknown tensor {name} in directions archive", name=name)
        node = NodeId.parse(name[len(DIRECTION_PREFIX):])
        if graph is not None and node not in graph.senders:
            raise CustomError("ARTIFACT_MISMATCH", "Direction for {node} has no sender in the graph", node=node.name)
        directions[node] = tensor.to(torch.float64)
    try:
        regime = SteeringRegime.parse(metadata.get("regime", ""))
    except ValueError as e:
        raise CustomError("FORMAT_ERROR", "{path}: invalid regime ({err})", path=str(path), err=e)
    return SteeringDirections(
        directions=directions,
        regime=regime,
        epsilon=float(metadata.get("epsilon", 0.0)),
        n_pairs=int(metadata.get("n_pairs", 0)),
        attack_id=metadata.get("attack_id", ""),
        fingerprint=metadata.get("fingerprint", ""),
    )
