"""Paired dataset 디렉토리: tensors.cfw ({id}.clean / {id}.corrupted / {id}.foreground) + manifest.json"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import torch

from ..core.exceptions import CustomError
from ..models.data import PairedExample
from ..models.runtime import ModelConfig
from .archive_repository import read_container, write_container
from .file_store import read_json, write_json

TENSORS_FILE = "tensors.cfw"
MANIFEST_FILE = "manifest.json"


def save_pairs(
    directory: str | Path,
    pairs: Sequence[PairedExample],
    spec_digest: str,
    num_classes: int,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    directory = Path(directory)
    tensors = {}
    for pair in pairs:
        tensors[f"{pair.id}.clean"] = pair.clean
        tensors[f"{pair.id}.corrupted"] = pair.corrupted
        tensors[f"{pair.id}.foreground"] = pair.foreground.to(torch.float32)
    write_container(directory / TENSORS_FILE, tensors, {"kind": "pairs", "spec_digest": spec_digest})
    manifest = {
        "spec_digest": spec_digest,
        "num_classes": num_classes,
        "ids": [pair.id for pair in pairs],
        "labels": [pair.label for pair in pairs],
        "attack_targets": [pair.attack_target for pair in pairs],
        **(extra or {}),
    }
    write_json(directory / MANIFEST_FILE, manifest)
    return directory


def load_pairs(directory: str | Path, config: Optional[ModelConfig] = None) -> List[PairedExample]:
    """manifest 순서대로 pair를 복원하고 짝/label/shape를 검사"""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.exists():
        raise CustomError("FORMAT_ERROR", "Dataset {path} has no manifest", path=str(directory))
    manifest = read_json(manifest_path)
    tensors, _ = read_container(directory / TENSORS_FILE)

    ids = list(manifest.get("ids", []))
    labels = list(manifest.get("labels", []))
    targets = list(manifest.get("attack_targets", [None] * len(ids)))
    if not (len(ids) == len(labels) == len(targets)):
        raise CustomError("FORMAT_ERROR", "{path}: manifest ids/labels/attack_targets differ in length",
                          path=str(manifest_path))

    halves: Dict[str, set] = {}
    for name in tensors:
        stem, _, part = name.rpartition(".")
        halves.setdefault(stem, set()).add(part)
    orphans = sorted(
        stem for stem, parts in halves.items() if not {"clean", "corrupted"} <= parts
    ) + sorted(i for i in ids if i not in halves)
    if orphans:
        raise CustomError("FORMAT_ERROR", "Orphaned half-pairs: {ids}", ids=", ".join(orphans))

    num_classes = config.num_classes if config is not None else manifest.get("num_classes")
    expected_shape = (config.patch_count, config.input_dim) if config is not None else None
    pairs = []
    for pair_id, label, target in zip(ids, labels, targets):
        for value, what in ((label, "label"), (target, "attack target")):
            if value is not None and num_classes is not None and not 0 <= value < num_classes:
                raise CustomError("FORMAT_ERROR", "Pair {id}: {what} {value} outside [0, {c})",
                                  id=pair_id, what=what, value=value, c=num_classes)
        clean, corrupted = tensors[f"{pair_id}.clean"], tensors[f"{pair_id}.corrupted"]
        shape = expected_shape or tuple(tensors[f"{ids[0]}.clean"].shape)
        if tuple(clean.shape) != shape or tuple(corrupted.shape) != shape:
            key = "ARTIFACT_MISMATCH" if expected_shape is not None else "FORMAT_ERROR"
            raise CustomError(key, "Pair {id} has shape {got}, expected {want}",
                              id=pair_id, got=tuple(clean.shape), want=shape)
        foreground = tensors.get(f"{pair_id}.foreground")
        pairs.append(PairedExample(
            id=pair_id,
            clean=clean,
            corrupted=corrupted,
            label=int(label),
            foreground=foreground.bool() if foreground is not None else torch.zeros(shape[0], dtype=torch.bool),
            attack_target=None if target is None else int(target),
        ))
    return pairs


def dataset_manifest(directory: str | Path) -> Dict[str, Any]:
    return read_json(Path(directory) / MANIFEST_FILE)
