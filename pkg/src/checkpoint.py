"""
Checkpoints: a JSON manifest plus a blob of little-endian float64 values.
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from src.errors import CheckpointError
from src.network import NetworkSpec, Parameters

logger = logging.getLogger(__name__)

FORMAT_NAME = "trady-checkpoint"
FORMAT_VERSION = 1
DTYPE_TAG = "f64"
BLOB_DTYPE = np.dtype("<f8")


def _blob_path(manifest_path: Path, manifest: dict) -> Path:
    return manifest_path.parent / manifest["blob"]


def save_tensors(tensors: Mapping[str, np.ndarray], manifest_path, network: str = "") -> Path:
    """Write tensors in mapping order. Returns the manifest path."""
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_name = manifest_path.with_suffix(".bin").name

    entries = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        data = np.ascontiguousarray(tensor, dtype=BLOB_DTYPE).tobytes()
        entries.append({
            "name": name,
            "shape": list(np.shape(tensor)),
            "dtype": DTYPE_TAG,
            "offset": offset,
            "length": len(data),
        })
        chunks.append(data)
        offset += len(data)

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "network": network,
        "blob": blob_name,
        "tensors": entries,
    }
    try:
        (manifest_path.parent / blob_name).write_bytes(b"".join(chunks))
        manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    except OSError as e:
        raise CheckpointError(f"{manifest_path}: cannot write checkpoint: {e}") from e
    logger.info("[Checkpoint] saved %d tensors (%d bytes) to %s", len(entries), offset, manifest_path)
    return manifest_path


def _check_manifest(manifest: dict, blob_size: int, where: Path):
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{where}: not a checkpoint manifest")
    tensors = manifest.get("tensors")
    if not isinstance(tensors, list):
        raise CheckpointError(f"{where}: manifest has no tensor list")
    expected_offset = 0
    for entry in tensors:
        if not isinstance(entry, dict):
            raise CheckpointError(f"{where}: malformed tensor entry {entry!r}")
        name = entry.get("name")
        missing = [key for key in ("name", "offset", "length", "shape") if key not in entry]
        if missing:
            raise CheckpointError(f"{where}: tensor '{name}' is missing {missing}")
        if not isinstance(entry["shape"], list) or not all(isinstance(d, int) and d >= 0 for d in entry["shape"]):
            raise CheckpointError(f"{where}: tensor '{name}' has bad shape {entry['shape']}")
        if not isinstance(entry["offset"], int) or not isinstance(entry["length"], int):
            raise CheckpointError(f"{where}: tensor '{name}' needs integer offset and length")
        if entry.get("dtype") != DTYPE_TAG:
            raise CheckpointError(f"{where}: tensor '{name}' has dtype '{entry.get('dtype')}', expected '{DTYPE_TAG}'")
        if entry["offset"] != expected_offset:
            raise CheckpointError(f"{where}: tensor '{name}' starts at byte {entry['offset']}, "
                                  f"expected {expected_offset}")
        if math.prod(entry["shape"]) * BLOB_DTYPE.itemsize != entry["length"]:
            raise CheckpointError(f"{where}: tensor '{name}' of shape {entry['shape']} "
                                  f"cannot be {entry['length']} bytes")
        expected_offset += entry["length"]
    if expected_offset != blob_size:
        raise CheckpointError(f"{where}: manifest covers {expected_offset} bytes, blob has {blob_size}")


def load_tensors(manifest_path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read every tensor; returns (tensors, manifest)."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        blob = _blob_path(manifest_path, manifest).read_bytes()
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"{manifest_path}: cannot read checkpoint: {e}") from e
    _check_manifest(manifest, len(blob), manifest_path)

    tensors = {}
    for entry in manifest["tensors"]:
        values = np.frombuffer(blob, dtype=BLOB_DTYPE, count=entry["length"] // BLOB_DTYPE.itemsize,
                               offset=entry["offset"])
        tensors[entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
    return tensors, manifest


def save_checkpoint(spec: NetworkSpec, params: Parameters, manifest_path) -> Path:
    return save_tensors(params.to_tensors(), manifest_path, network=spec.name)


def load_checkpoint(spec: NetworkSpec, manifest_path) -> Parameters:
    """Load parameters for `spec`; shapes must match it."""
    tensors, manifest = load_tensors(manifest_path)
    if manifest.get("network") and manifest["network"] != spec.name:
        raise CheckpointError(f"{manifest_path}: checkpoint is for network '{manifest['network']}', "
                              f"not '{spec.name}'")
    try:
        return Parameters.from_tensors(spec, tensors)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{manifest_path}: {e}") from e


def load_backbone(spec: NetworkSpec, manifest_path) -> Dict[int, np.ndarray]:
    """
    Conv kernels only, for transfer to a task with a different number of
    classes. The classifier is re-initialised by the caller.
    """
    tensors, _ = load_tensors(manifest_path)
    conv = {}
    for i in spec.conv_layers:
        name = f"layer{i}.weight"
        if name not in tensors:
            raise CheckpointError(f"{manifest_path}: missing tensor '{name}'")
        expected = spec.layers[i].geom.weight_shape
        if tensors[name].shape != expected:
            raise CheckpointError(f"{manifest_path}: '{name}' has shape {tensors[name].shape}, expected {expected}")
        conv[i] = tensors[name]
    return conv
